"""Dense primitives with analytic vector-Jacobian products.

Every primitive comes as a ``forward``/``*_backward`` pair.  Backward
functions take the forward inputs plus the upstream cotangent and return one
cotangent per differentiable input, shaped exactly like that input.

Contractions report their multiply-accumulate count to an optional
:func:`count_ops` context, and nonlinearities report one op per element.
The counts come from the runtime operand shapes, which makes the context an
independent check on the closed-form cost model.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .tensor import DimensionError

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


class DegenerateStatisticsError(ValueError):
    """Batch statistics requested over a single element per channel."""


# ---------------------------------------------------------------------------
# instrumentation
# ---------------------------------------------------------------------------

@dataclass
class OpCounter:
    macs: Counter
    nonlinear: Counter

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_nonlinear(self) -> int:
        return sum(self.nonlinear.values())


_COUNTER: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "cage_op_counter", default=None
)
_SCOPE: contextvars.ContextVar[str] = contextvars.ContextVar("cage_op_scope", default="")


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Collect MAC and nonlinearity counts of every op run inside the block."""
    counter = OpCounter(Counter(), Counter())
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label counts recorded inside the block with ``name``."""
    token = _SCOPE.set(name)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def _record_macs(n: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.macs[_SCOPE.get() or "unscoped"] += int(n)


def _record_nonlinear(n: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.nonlinear[_SCOPE.get() or "unscoped"] += int(n)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# convolutions and linear maps
# ---------------------------------------------------------------------------

def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise convolution, ``w`` is ``(Cout, Cin)``."""
    _require(x.ndim == 4, f"conv1x1: x must be (B,C,H,W), got {x.shape}")
    _require(
        w.ndim == 2 and w.shape[1] == x.shape[1],
        f"conv1x1: Cin mismatch, x axis 1 = {x.shape[1]} vs w axis 1 = {w.shape[1] if w.ndim == 2 else w.shape}",
    )
    _require(b.shape == (w.shape[0],), f"conv1x1: bias shape {b.shape} != ({w.shape[0]},)")
    B, _, H, W = x.shape
    _record_macs(B * H * W * w.shape[0] * w.shape[1])
    return np.einsum("oc,bchw->bohw", w, x) + b[None, :, None, None]


def conv1x1_backward(x, w, b, dout):
    dx = np.einsum("oc,bohw->bchw", w, dout)
    dw = np.einsum("bohw,bchw->oc", dout, x)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def dwconv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Depthwise 3x3 cross-correlation, stride 1, zero padding 1; ``w`` is ``(C,3,3)``."""
    _require(x.ndim == 4, f"dwconv3x3: x must be (B,C,H,W), got {x.shape}")
    _require(
        w.shape == (x.shape[1], 3, 3),
        f"dwconv3x3: channel mismatch, x axis 1 = {x.shape[1]} vs w {w.shape}",
    )
    _require(b.shape == (x.shape[1],), f"dwconv3x3: bias shape {b.shape}")
    B, C, H, W = x.shape
    _record_macs(B * C * H * W * 9)
    xp = _pad1(x)
    out = np.zeros_like(x, dtype=np.result_type(x, w))
    for i in range(3):
        for j in range(3):
            out += w[None, :, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    return out + b[None, :, None, None]


def dwconv3x3_backward(x, w, b, dout):
    H, W = x.shape[2:]
    xp = _pad1(x)
    dxp = np.zeros_like(xp, dtype=np.result_type(x, dout))
    dw = np.zeros_like(w, dtype=np.result_type(w, dout))
    for i in range(3):
        for j in range(3):
            dw[:, i, j] = np.einsum("bchw,bchw->c", dout, xp[:, :, i:i + H, j:j + W])
            dxp[:, :, i:i + H, j:j + W] += w[None, :, i, j, None, None] * dout
    return dxp[:, :, 1:-1, 1:-1], dw, dout.sum(axis=(0, 2, 3))


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense 3x3 cross-correlation, padding 1; ``w`` is ``(Cout, Cin, 3, 3)``."""
    _require(x.ndim == 4, f"conv3x3: x must be (B,C,H,W), got {x.shape}")
    _require(
        w.ndim == 4 and w.shape[1:] == (x.shape[1], 3, 3),
        f"conv3x3: Cin mismatch, x axis 1 = {x.shape[1]} vs w {w.shape}",
    )
    _require(b.shape == (w.shape[0],), f"conv3x3: bias shape {b.shape}")
    B, C, H, W = x.shape
    _record_macs(B * H * W * w.shape[0] * C * 9)
    xp = _pad1(x)
    out = np.zeros((B, w.shape[0], H, W), dtype=np.result_type(x, w))
    for i in range(3):
        for j in range(3):
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j], xp[:, :, i:i + H, j:j + W])
    return out + b[None, :, None, None]


def conv3x3_backward(x, w, b, dout):
    H, W = x.shape[2:]
    xp = _pad1(x)
    dxp = np.zeros_like(xp, dtype=np.result_type(x, dout))
    dw = np.zeros_like(w, dtype=np.result_type(w, dout))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i:i + H, j:j + W]
            dw[:, :, i, j] = np.einsum("bohw,bchw->oc", dout, patch)
            dxp[:, :, i:i + H, j:j + W] += np.einsum("oc,bohw->bchw", w[:, :, i, j], dout)
    return dxp[:, :, 1:-1, 1:-1], dw, dout.sum(axis=(0, 2, 3))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w (+ b)`` over the last axis; ``w`` is ``(Din, Dout)``."""
    _require(w.ndim == 2, f"linear: w must be 2-D, got {w.shape}")
    _require(
        x.shape[-1] == w.shape[0],
        f"linear: Din mismatch, x last axis = {x.shape[-1]} vs w axis 0 = {w.shape[0]}",
    )
    _record_macs(x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    out = x @ w
    if b is not None:
        _require(b.shape == (w.shape[1],), f"linear: bias shape {b.shape}")
        out = out + b
    return out


def linear_backward(x, w, b, dout):
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0) if b is not None else None
    return dx, dw, db


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a[..., m, k] @ b[..., k, n]`` with equal leading axes."""
    _require(
        a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2],
        f"matmul: incompatible shapes {a.shape} @ {b.shape}",
    )
    _record_macs(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])
    return a @ b


def matmul_backward(a, b, dout):
    return dout @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dout


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gain, shift, eps: float = LAYER_NORM_EPS):
    _require(
        gain.shape == (x.shape[-1],) and shift.shape == (x.shape[-1],),
        f"layer_norm: affine shape {gain.shape}/{shift.shape} vs last axis {x.shape[-1]}",
    )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + shift


def layer_norm_backward(x, gain, shift, dout, eps: float = LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    lead = tuple(range(x.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dshift = dout.sum(axis=lead)
    dxhat = dout * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dshift


def batch_norm(
    x: np.ndarray,
    gain: np.ndarray,
    shift: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = BATCH_NORM_EPS,
    momentum: float = BATCH_NORM_MOMENTUM,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel batch normalization over ``(B, H, W)``.

    Returns ``(out, new_running_mean, new_running_var)``; inputs are never
    mutated.  Train mode normalizes with the biased batch variance and folds
    the unbiased variance into the running estimate:
    ``new = (1 - momentum) * old + momentum * batch``.
    """
    _require(x.ndim == 4, f"batch_norm: x must be (B,C,H,W), got {x.shape}")
    C = x.shape[1]
    for name, t in (("gain", gain), ("shift", shift), ("running_mean", running_mean),
                    ("running_var", running_var)):
        _require(t.shape == (C,), f"batch_norm: {name} shape {t.shape} != ({C},)")
    if mode == "eval":
        scale = gain / np.sqrt(running_var + eps)
        out = (x - running_mean[None, :, None, None]) * scale[None, :, None, None]
        return out + shift[None, :, None, None], running_mean.copy(), running_var.copy()
    if mode != "train":
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise DegenerateStatisticsError(
            "batch_norm: train mode needs B*H*W >= 2 elements per channel"
        )
    mu = x.mean(axis=(0, 2, 3))
    xc = x - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    xhat = xc / np.sqrt(var + eps)[None, :, None, None]
    out = xhat * gain[None, :, None, None] + shift[None, :, None, None]
    new_mean = (1.0 - momentum) * running_mean + momentum * mu
    new_var = (1.0 - momentum) * running_var + momentum * var * n / (n - 1)
    return out, new_mean, new_var


def batch_norm_backward(x, gain, running_mean, running_var, dout, mode="train",
                        eps: float = BATCH_NORM_EPS):
    """Cotangents ``(dx, dgain, dshift)``; running stats are constants."""
    axes = (0, 2, 3)
    dshift = dout.sum(axis=axes)
    if mode == "eval":
        rstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * rstd[None, :, None, None]
        dgain = (dout * xhat).sum(axis=axes)
        return dout * (gain * rstd)[None, :, None, None], dgain, dshift
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    dgain = (dout * xhat).sum(axis=axes)
    dxhat = dout * gain[None, :, None, None]
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    )
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    _record_nonlinear(x.size)
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_backward(x, dout):
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (dout * (cdf + x * pdf),)


def sigmoid(x: np.ndarray) -> np.ndarray:
    _record_nonlinear(x.size)
    # two branches keep exp() from overflowing
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x, dout):
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -700, 700)))
    return (dout * s * (1.0 - s),)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    _record_nonlinear(x.size)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim_backward(x, dout, out: np.ndarray | None = None):
    s = softmax_lastdim(x) if out is None else out
    return (s * (dout - (dout * s).sum(axis=-1, keepdims=True)),)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reduce_mean(x: np.ndarray, axis: int) -> np.ndarray:
    return x.mean(axis=axis)


def reduce_mean_backward(x, axis, dout):
    n = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(dout, axis) / n, x.shape).copy(),)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require(a.ndim == 4 and b.ndim == 4, "concat_channels: operands must be (B,C,H,W)")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape} (axes 0, 2, 3)"
        )
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(a, b, dout):
    c1 = a.shape[1]
    return dout[:, :c1], dout[:, c1:]


def add(a, b):
    return a + b


def add_backward(a, b, dout):
    return _unbroadcast(dout, a.shape), _unbroadcast(dout, b.shape)


def mul(a, b):
    return a * b


def mul_backward(a, b, dout):
    return _unbroadcast(dout * b, a.shape), _unbroadcast(dout * a, b.shape)


# ---------------------------------------------------------------------------
# op/gradient pairs and finite-difference checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpGradPair:
    """A forward function and its VJP.

    ``backward(inputs, cotangent)`` returns a tuple with one cotangent per
    entry of ``inputs``.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[[Sequence[np.ndarray], np.ndarray], tuple]


def _pair(name, fwd, bwd):
    return OpGradPair(name, fwd, lambda inputs, d: tuple(bwd(*inputs, d)))


OPS: dict[str, OpGradPair] = {
    "conv1x1": _pair("conv1x1", conv1x1, conv1x1_backward),
    "dwconv3x3": _pair("dwconv3x3", dwconv3x3, dwconv3x3_backward),
    "conv3x3": _pair("conv3x3", conv3x3, conv3x3_backward),
    "linear": _pair("linear", linear, linear_backward),
    "matmul": _pair("matmul", matmul, matmul_backward),
    "layer_norm": _pair("layer_norm", layer_norm, layer_norm_backward),
    "gelu": _pair("gelu", gelu, gelu_backward),
    "sigmoid": _pair("sigmoid", sigmoid, sigmoid_backward),
    "softmax_lastdim": _pair("softmax_lastdim", softmax_lastdim, softmax_lastdim_backward),
    "concat_channels": _pair("concat_channels", concat_channels, concat_channels_backward),
    "add": _pair("add", add, add_backward),
    "mul": _pair("mul", mul, mul_backward),
    "batch_norm_train": OpGradPair(
        "batch_norm_train",
        lambda x, g, s: batch_norm(x, g, s, np.zeros_like(g), np.ones_like(g), "train")[0],
        lambda inputs, d: batch_norm_backward(
            inputs[0], inputs[1], np.zeros_like(inputs[1]), np.ones_like(inputs[1]), d, "train"
        ),
    ),
}


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"non-finite forward output at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(
    op: OpGradPair,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``op.backward`` with central differences of ``<forward(x), u>``.

    ``u`` is a fixed random cotangent drawn from ``seed``.  Inputs must be
    float64; they are copied before perturbation.
    """
    xs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    if any(np.asarray(x).dtype != np.float64 for x in inputs):
        raise GradCheckError("grad_check requires 64-bit inputs")
    out = op.forward(*xs)
    if not np.all(np.isfinite(out)):
        raise GradCheckError(f"{op.name}: non-finite forward output")
    u = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = op.backward(xs, u)

    def loss() -> float:
        return float(np.sum(op.forward(*xs) * u))

    errors = []
    for x, a in zip(xs, analytic):
        if a is None:
            errors.append(0.0)
            continue
        if a.shape != x.shape:
            raise GradCheckError(f"{op.name}: cotangent shape {a.shape} != input {x.shape}")
        errors.append(relative_error(a, numeric_gradient(loss, x, h), floor))
    return GradCheckReport(max(errors) if errors else 0.0, errors, tolerance)
