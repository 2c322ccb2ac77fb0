"""Tensor helpers and the ``CAGT`` binary tensor format.

Tensors are plain ``numpy.ndarray`` objects in C order.  Feature maps are
stored channel-major ``(B, C, H, W)``; :func:`to_channels_last` and
:func:`to_channels_first` convert at module boundaries.

File layout (little-endian)::

    magic   4 bytes  b"CAGT"
    version u32      1
    rank    u32
    extents u64[rank]
    dtype   u32      0 = float64, 1 = float32
    data    raw, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CAGT"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class DimensionError(ValueError):
    """Raised when operand extents do not line up."""


class TensorFormatError(ValueError):
    pass


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the tensor invariants: positive extents, finite values."""
    if any(int(n) < 1 for n in x.shape):
        raise DimensionError(f"{name}: all extents must be >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains non-finite values")
    return x


def to_channels_first(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, C, H, W)."""
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


def to_channels_last(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C)."""
    return np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))


def encode(x: np.ndarray) -> bytes:
    arr = np.asarray(x)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    else:
        arr = arr.astype("<f8", copy=False)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", DTYPE_TAGS[arr.dtype])
    return header + np.ascontiguousarray(arr).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not a CAGT tensor")
    try:
        version, rank = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise TensorFormatError(f"unsupported CAGT version {version}")
        off = 12
        extents = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        (tag,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error as exc:
        raise TensorFormatError(f"truncated CAGT header: {exc}") from exc
    if tag not in TAG_DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = TAG_DTYPES[tag]
    count = int(np.prod(extents, dtype=np.int64))
    if len(buf) - off != count * dtype.itemsize:
        raise TensorFormatError(
            f"payload is {len(buf) - off} bytes, expected {count * dtype.itemsize}"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return data.reshape(extents).astype(dtype.newbyteorder("="))


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, x: np.ndarray) -> None:
    atomic_write_bytes(path, encode(x))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
