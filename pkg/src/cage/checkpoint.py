"""Parameter checkpoints: a JSON manifest pointing at CAGT tensor files."""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import tensor
from .fusion import CageConfig, CageParams, shape_audit

FORMAT = "cage-checkpoint/1"


def save_checkpoint(directory: str | os.PathLike, params: CageParams, cfg: CageConfig) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, w in params.weights.items():
        fname = f"{name}.cagt"
        tensor.save(d / fname, w)
        files[name] = fname
    tensor.save(d / "running_mean.cagt", params.running_mean)
    tensor.save(d / "running_var.cagt", params.running_var)
    manifest = {
        "format": FORMAT,
        "config": cfg.to_dict(),
        "tensors": files,
        "buffers": {"running_mean": "running_mean.cagt", "running_var": "running_var.cagt"},
    }
    path = d / "checkpoint.json"
    tensor.atomic_write_bytes(path, (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[CageParams, CageConfig]:
    """Load from ``checkpoint.json`` or the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} manifest")
    cfg = CageConfig.from_dict(manifest["config"])
    base = path.parent
    weights = {n: tensor.load(base / f) for n, f in manifest["tensors"].items()}
    buffers = manifest["buffers"]
    params = CageParams(weights, tensor.load(base / buffers["running_mean"]),
                        tensor.load(base / buffers["running_var"]))
    problems = shape_audit(params, cfg)
    if problems:
        raise ValueError(f"{path}: checkpoint does not match its config: {problems}")
    return params, cfg
