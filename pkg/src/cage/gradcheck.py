"""Finite-difference verification of the full CAGE backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion
from .fusion import CageConfig
from .ops import numeric_gradient, relative_error

DEFAULT_CONFIG = CageConfig(c_in=8, c_out=8, embed_dim=16, proj_dim=8, heads=2)
DEFAULT_SHAPE = {"batch": 2, "height": 4, "width": 4, "tokens": 3}


@dataclass
class BlockGradReport:
    errors: dict[str, float]
    tolerance: float
    seed: int
    mode: str
    extra: dict = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def groups(self) -> dict[str, float]:
        """Errors folded per layer (``q_proj.w`` and ``q_proj.b`` -> ``q_proj``)."""
        out: dict[str, float] = {}
        for name, err in self.errors.items():
            key = name.rsplit(".", 1)[0] if "." in name else name
            out[key] = max(out.get(key, 0.0), err)
        return out

    def to_dict(self) -> dict:
        name, err = self.worst
        return {"seed": self.seed, "mode": self.mode, "tolerance": self.tolerance,
                "passed": self.passed, "worst": {"name": name, "error": err},
                "groups": self.groups()}


def block_inputs(cfg: CageConfig, seed: int, batch: int, height: int, width: int, tokens: int):
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((batch, cfg.c_in, height, width))
    t = rng.standard_normal((batch, tokens, cfg.embed_dim))
    return x, t


def check_block(cfg: CageConfig = DEFAULT_CONFIG, seed: int = 0, tolerance: float = 1e-4,
                mode: str = "train", h: float = 1e-5, floor: float = 1e-6,
                batch: int = 2, height: int = 4, width: int = 4, tokens: int = 3,
                ) -> BlockGradReport:
    """Check d(sum F_out^2) for every parameter tensor and both inputs.

    Parameters are drawn with ``identity_init=False`` so no path is
    switched off by a zero initializer.

    Central differences carry round-off of about ``eps * |loss| / h``, so a
    coordinate's error is measured relative to
    ``max(|analytic|, |numeric|, floor)`` with ``floor`` raised to
    ``10 * eps * |loss| / (h * tolerance)``: gradients that sit under the
    round-off level are held to an absolute bound at that level instead.
    """
    p = fusion.init_params(cfg, seed, identity_init=False)
    x, t = block_inputs(cfg, seed, batch, height, width, tokens)

    def loss() -> float:
        out, _ = fusion.forward(x, t, p, cfg, mode, update_running_stats=False)
        return float(np.sum(out * out))

    out, acts = fusion.forward(x, t, p, cfg, mode, update_running_stats=False)
    grads = fusion.backward(2.0 * out, acts, p, cfg)
    noise = 10.0 * np.finfo(np.float64).eps * max(abs(float(np.sum(out * out))), 1.0) / h
    floor = max(floor, noise / tolerance)
    errors = {}
    for name, w in p.weights.items():
        errors[name] = relative_error(grads[name], numeric_gradient(loss, w, h), floor)
    errors["F_img"] = relative_error(grads["F_img"], numeric_gradient(loss, x, h), floor)
    errors["F_text"] = relative_error(grads["F_text"], numeric_gradient(loss, t, h), floor)
    return BlockGradReport(errors, tolerance, seed, mode, {"floor": floor})
