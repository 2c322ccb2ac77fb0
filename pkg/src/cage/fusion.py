"""The CAGE text-vision fusion block.

Pipeline, with ``x`` the image map ``(B, C, H, W)`` and ``t`` the text
embeddings ``(B, L, D)``::

    Q       = LN(flatten(conv1x1(x)))                       (B, HW, P)
    K, V    = LN(t) @ W_K, LN(t) @ W_V                      (B, L, P)
    ctx_map = out_proj(concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h)
    G       = sigmoid(conv1x1(gelu(conv3x3(x))))            (B, 1, H, W)
    ctx_ref = G * dw_block(conv1x1(ctx_map))
    pre     = merge_conv1x1([x ; ctx_ref])
    gamma, beta = film_mlp(mean_L(t))
    out     = residual(x) + BN((1 + gamma) * pre + beta)

Every stage returns a cache consumed by the matching backward stage, so
:func:`backward` is exact reverse-mode through the whole block.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .ops import scope
from .tensor import DimensionError


class EmptyVocabularyError(ValueError):
    """No text tokens were supplied."""


class ConsistencyError(RuntimeError):
    """Activations do not belong to the params/config given to backward."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CageConfig:
    c_in: int
    c_out: int
    embed_dim: int
    proj_dim: int
    heads: int = 1
    ctx_channels: int | None = None
    gate_enabled: bool = True
    residual_kind: str = "identity"
    attn_out_proj: bool = True
    film_hidden: int | None = None
    dw_units: int = 2
    ln_eps: float = ops.LAYER_NORM_EPS
    bn_eps: float = ops.BATCH_NORM_EPS
    bn_momentum: float = ops.BATCH_NORM_MOMENTUM

    def __post_init__(self):
        # defaults that depend on other fields
        if self.ctx_channels is None:
            object.__setattr__(self, "ctx_channels", max(1, self.c_out // 2))
        if self.film_hidden is None:
            object.__setattr__(self, "film_hidden", self.embed_dim)
        for name in ("c_in", "c_out", "embed_dim", "proj_dim", "heads", "ctx_channels",
                     "film_hidden", "dw_units"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.proj_dim % self.heads:
            raise ConfigError(
                f"proj_dim={self.proj_dim} is not divisible by heads={self.heads}"
            )
        if self.residual_kind not in ("identity", "projected"):
            raise ConfigError(f"residual_kind must be identity|projected, got {self.residual_kind!r}")
        if self.residual_kind == "identity" and self.c_in != self.c_out:
            raise ConfigError(
                f"identity residual needs c_in == c_out, got {self.c_in} vs {self.c_out}"
            )
        if not (self.ln_eps > 0 and self.bn_eps > 0 and 0 <= self.bn_momentum <= 1):
            raise ConfigError("eps must be > 0 and momentum in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.proj_dim // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "CageConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown CageConfig keys: {', '.join(unknown)}")
        return cls(**data)


def param_shapes(cfg: CageConfig) -> dict[str, tuple[int, ...]]:
    """Learnable tensor shapes, in a fixed order."""
    C, P, D, X, O = cfg.c_in, cfg.proj_dim, cfg.embed_dim, cfg.ctx_channels, cfg.c_out
    Dh = cfg.film_hidden
    s: dict[str, tuple[int, ...]] = {
        "q_proj.w": (P, C), "q_proj.b": (P,),
        "q_norm.g": (P,), "q_norm.b": (P,),
        "text_norm.g": (D,), "text_norm.b": (D,),
        "w_k": (D, P), "w_v": (D, P),
    }
    if cfg.attn_out_proj:
        s.update({"attn_out.w": (P, P), "attn_out.b": (P,)})
    if cfg.gate_enabled:
        s.update({
            "gate_conv3x3.w": (C, C, 3, 3), "gate_conv3x3.b": (C,),
            "gate_conv1x1.w": (1, C), "gate_conv1x1.b": (1,),
        })
    s.update({"ctx_proj.w": (X, P), "ctx_proj.b": (X,)})
    for i in range(cfg.dw_units):
        s.update({
            f"dw{i}.dw.w": (X, 3, 3), f"dw{i}.dw.b": (X,),
            f"dw{i}.pw.w": (X, X), f"dw{i}.pw.b": (X,),
        })
    s.update({
        "merge.w": (O, C + X), "merge.b": (O,),
        "film_fc1.w": (D, Dh), "film_fc1.b": (Dh,),
        "film_fc2.w": (Dh, 2 * O), "film_fc2.b": (2 * O,),
    })
    if cfg.residual_kind == "projected":
        s.update({"residual.w": (O, C), "residual.b": (O,)})
    s.update({"bn.g": (O,), "bn.b": (O,)})
    return s


@dataclass
class CageParams:
    """Learnable weights plus batch-norm running statistics (buffers)."""

    weights: dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def copy(self) -> "CageParams":
        return copy.deepcopy(self)

    def weights_digest(self) -> str:
        """Hash of the learnable tensors; backward uses it to spot stale activations."""
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(int(w.size) for w in self.weights.values())


def _fan_in(name: str, shape: tuple[int, ...], cfg: CageConfig) -> int:
    layer = name.rsplit(".", 1)[0]
    if name in ("w_k", "w_v"):
        return shape[0]
    if layer.startswith("film_fc") or layer == "attn_out":
        return shape[0] if name.endswith(".w") else {
            "film_fc1": cfg.embed_dim, "film_fc2": cfg.film_hidden, "attn_out": cfg.proj_dim
        }[layer]
    if layer == "gate_conv3x3":
        return cfg.c_in * 9
    if layer.endswith(".dw"):
        return 9
    # conv1x1 weights are (Cout, Cin)
    w_shape = param_shapes(cfg)[f"{layer}.w"]
    return w_shape[1]


def init_params(cfg: CageConfig, seed: int = 0, identity_init: bool = True) -> CageParams:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    With ``identity_init`` the output batch-norm gain and the last FiLM layer
    start at zero, so a fresh block in eval mode is exactly its residual map.
    ``identity_init=False`` randomizes those too (gains near 1, positive
    running variances), which is what gradient checks want.
    """
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.g"):
            w = np.ones(shape)
        elif name.endswith("norm.b"):
            w = np.zeros(shape)
        elif name.startswith("bn."):
            w = np.zeros(shape) if (identity_init or name == "bn.b") else np.ones(shape)
        elif name.startswith("film_fc2") and identity_init:
            w = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, cfg))
            w = rng.uniform(-bound, bound, size=shape)
        weights[name] = w
    if not identity_init:
        for name in ("q_norm.g", "text_norm.g", "bn.g"):
            weights[name] = 1.0 + 0.2 * rng.uniform(-1, 1, weights[name].shape)
        for name in ("q_norm.b", "text_norm.b", "bn.b"):
            weights[name] = 0.1 * rng.uniform(-1, 1, weights[name].shape)
    O = cfg.c_out
    running_var = np.ones(O) if identity_init else rng.uniform(0.5, 1.5, O)
    running_mean = np.zeros(O) if identity_init else 0.1 * rng.standard_normal(O)
    return CageParams(weights, running_mean, running_var)


def shape_audit(params: CageParams, cfg: CageConfig) -> list[str]:
    """Names of tensors whose shapes disagree with the config (empty = OK)."""
    expected = param_shapes(cfg)
    problems = [f"missing {n}" for n in expected if n not in params.weights]
    problems += [f"unexpected {n}" for n in params.weights if n not in expected]
    problems += [
        f"{n}: {params.weights[n].shape} != {s}"
        for n, s in expected.items() if n in params.weights and params.weights[n].shape != s
    ]
    for name, buf in (("running_mean", params.running_mean), ("running_var", params.running_var)):
        if buf.shape != (cfg.c_out,):
            problems.append(f"{name}: {buf.shape} != ({cfg.c_out},)")
    return problems


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _check_inputs(F_img, F_text, cfg: CageConfig):
    if F_img.ndim != 4 or F_img.shape[1] != cfg.c_in:
        raise DimensionError(f"F_img must be (B,{cfg.c_in},H,W), got {F_img.shape}")
    if F_text.ndim != 3:
        raise DimensionError(f"F_text must be (B,L,D), got {F_text.shape}")
    if F_text.shape[1] == 0:
        raise EmptyVocabularyError("F_text has no tokens (L = 0)")
    if F_text.shape[2] != cfg.embed_dim:
        raise DimensionError(
            f"F_text depth (axis 2) = {F_text.shape[2]} != embed_dim {cfg.embed_dim}"
        )
    if F_text.shape[0] != F_img.shape[0]:
        raise DimensionError(
            f"batch mismatch: F_img axis 0 = {F_img.shape[0]}, F_text axis 0 = {F_text.shape[0]}"
        )


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, N, P = x.shape
    return x.reshape(B, N, heads, P // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, N, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dk)


def cross_attention_context(F_img, F_text, p: CageParams, cfg: CageConfig):
    """Multi-head cross-attention from pixels to text tokens.

    Returns ``(ctx_map, cache)`` with ``ctx_map`` of shape ``(B, P, H, W)``.
    """
    _check_inputs(F_img, F_text, cfg)
    B, _, H, W = F_img.shape
    P, eps = cfg.proj_dim, cfg.ln_eps
    with scope("q_proj"):
        q_conv = ops.conv1x1(F_img, p["q_proj.w"], p["q_proj.b"])
    q_flat = q_conv.reshape(B, P, H * W).transpose(0, 2, 1)
    Q = ops.layer_norm(q_flat, p["q_norm.g"], p["q_norm.b"], eps)
    t_norm = ops.layer_norm(F_text, p["text_norm.g"], p["text_norm.b"], eps)
    with scope("k_proj"):
        K = ops.linear(t_norm, p["w_k"])
    with scope("v_proj"):
        V = ops.linear(t_norm, p["w_v"])
    Qh, Kh, Vh = (_split_heads(a, cfg.heads) for a in (Q, K, V))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    KhT = np.swapaxes(Kh, -1, -2)
    with scope("attn_scores"):
        scores = ops.matmul(Qh, KhT) * scale
        attn = ops.softmax_lastdim(scores)
    with scope("attn_mix"):
        Oh = ops.matmul(attn, Vh)
    O = _merge_heads(Oh)
    if cfg.attn_out_proj:
        with scope("attn_out"):
            O2 = ops.linear(O, p["attn_out.w"], p["attn_out.b"])
    else:
        O2 = O
    ctx_map = np.ascontiguousarray(O2.transpose(0, 2, 1).reshape(B, P, H, W))
    cache = dict(F_img=F_img, F_text=F_text, q_flat=q_flat, Q=Q, t_norm=t_norm, K=K, V=V,
                 Qh=Qh, KhT=KhT, Vh=Vh, attn=attn, O=O, scale=scale)
    return ctx_map, cache


def cross_attention_backward(d_ctx, cache, p: CageParams, cfg: CageConfig, grads: dict):
    """Accumulates param grads into ``grads``; returns ``(dF_img, dF_text)``."""
    B, P, H, W = d_ctx.shape
    eps = cfg.ln_eps
    dO2 = d_ctx.reshape(B, P, H * W).transpose(0, 2, 1)
    if cfg.attn_out_proj:
        dO, grads["attn_out.w"], grads["attn_out.b"] = ops.linear_backward(
            cache["O"], p["attn_out.w"], p["attn_out.b"], dO2)
    else:
        dO = dO2
    dOh = _split_heads(dO, cfg.heads)
    d_attn, dVh = ops.matmul_backward(cache["attn"], cache["Vh"], dOh)
    (d_scores,) = ops.softmax_lastdim_backward(None, d_attn, out=cache["attn"])
    d_scores = d_scores * cache["scale"]
    dQh, dKhT = ops.matmul_backward(cache["Qh"], cache["KhT"], d_scores)
    dQ = _merge_heads(dQh)
    dK = _merge_heads(np.swapaxes(dKhT, -1, -2))
    dV = _merge_heads(dVh)
    t_norm = cache["t_norm"]
    dt_k, grads["w_k"], _ = ops.linear_backward(t_norm, p["w_k"], None, dK)
    dt_v, grads["w_v"], _ = ops.linear_backward(t_norm, p["w_v"], None, dV)
    dF_text, grads["text_norm.g"], grads["text_norm.b"] = ops.layer_norm_backward(
        cache["F_text"], p["text_norm.g"], p["text_norm.b"], dt_k + dt_v, eps)
    dq_flat, grads["q_norm.g"], grads["q_norm.b"] = ops.layer_norm_backward(
        cache["q_flat"], p["q_norm.g"], p["q_norm.b"], dQ, eps)
    dq_conv = dq_flat.transpose(0, 2, 1).reshape(B, P, H, W)
    dF_img, grads["q_proj.w"], grads["q_proj.b"] = ops.conv1x1_backward(
        cache["F_img"], p["q_proj.w"], p["q_proj.b"], dq_conv)
    return dF_img, dF_text


def occlusion_gate(F_img, p: CageParams, cfg: CageConfig):
    """Per-pixel gate in [0, 1], shape ``(B, 1, H, W)``; all ones when disabled."""
    B, _, H, W = F_img.shape
    if not cfg.gate_enabled:
        return np.ones((B, 1, H, W)), {"enabled": False}
    with scope("gate_conv3x3"):
        g1 = ops.conv3x3(F_img, p["gate_conv3x3.w"], p["gate_conv3x3.b"])
        g2 = ops.gelu(g1)
    with scope("gate_conv1x1"):
        g3 = ops.conv1x1(g2, p["gate_conv1x1.w"], p["gate_conv1x1.b"])
        G = ops.sigmoid(g3)
    return G, {"enabled": True, "F_img": F_img, "g1": g1, "g2": g2, "g3": g3}


def occlusion_gate_backward(dG, cache, p: CageParams, grads: dict):
    if not cache["enabled"]:
        return None
    (dg3,) = ops.sigmoid_backward(cache["g3"], dG)
    dg2, grads["gate_conv1x1.w"], grads["gate_conv1x1.b"] = ops.conv1x1_backward(
        cache["g2"], p["gate_conv1x1.w"], p["gate_conv1x1.b"], dg3)
    (dg1,) = ops.gelu_backward(cache["g1"], dg2)
    dF_img, grads["gate_conv3x3.w"], grads["gate_conv3x3.b"] = ops.conv3x3_backward(
        cache["F_img"], p["gate_conv3x3.w"], p["gate_conv3x3.b"], dg1)
    return dF_img


def refine_context(ctx_map, G, p: CageParams, cfg: CageConfig):
    """``G * dw_block(conv1x1(ctx_map))``; G broadcasts across channels."""
    with scope("ctx_proj"):
        c = ops.conv1x1(ctx_map, p["ctx_proj.w"], p["ctx_proj.b"])
    units = []
    for i in range(cfg.dw_units):
        with scope(f"dw{i}.dw"):
            d = ops.dwconv3x3(c, p[f"dw{i}.dw.w"], p[f"dw{i}.dw.b"])
        with scope(f"dw{i}.pw"):
            pw = ops.conv1x1(d, p[f"dw{i}.pw.w"], p[f"dw{i}.pw.b"])
            out = ops.gelu(pw)
        units.append((c, d, pw))
        c = out
    ctx_ref = ops.mul(G, c)
    return ctx_ref, {"ctx_map": ctx_map, "units": units, "dw_out": c, "G": G}


def refine_context_backward(d_ref, cache, p: CageParams, cfg: CageConfig, grads: dict):
    """Returns ``(d_ctx_map, dG)``."""
    dG, dc = ops.mul_backward(cache["G"], cache["dw_out"], d_ref)
    for i in reversed(range(cfg.dw_units)):
        c_in, d, pw = cache["units"][i]
        (dpw,) = ops.gelu_backward(pw, dc)
        dd, grads[f"dw{i}.pw.w"], grads[f"dw{i}.pw.b"] = ops.conv1x1_backward(
            d, p[f"dw{i}.pw.w"], p[f"dw{i}.pw.b"], dpw)
        dc, grads[f"dw{i}.dw.w"], grads[f"dw{i}.dw.b"] = ops.dwconv3x3_backward(
            c_in, p[f"dw{i}.dw.w"], p[f"dw{i}.dw.b"], dd)
    d_ctx, grads["ctx_proj.w"], grads["ctx_proj.b"] = ops.conv1x1_backward(
        cache["ctx_map"], p["ctx_proj.w"], p["ctx_proj.b"], dc)
    return d_ctx, dG


def merge_and_film(F_img, ctx_ref, F_text, p: CageParams, cfg: CageConfig, film_override=None):
    """Merge image and gated context, then FiLM-modulate with pooled text.

    ``film_override=(gamma, beta)`` bypasses the FiLM MLP, each ``(B, c_out)``.
    Returns ``(F_modulated, gamma, beta, cache)``.
    """
    cat = ops.concat_channels(F_img, ctx_ref)
    with scope("merge"):
        pre = ops.conv1x1(cat, p["merge.w"], p["merge.b"])
    O = cfg.c_out
    cache = {"cat": cat, "pre": pre, "F_text": F_text, "override": film_override is not None,
             "c_img": F_img.shape[1]}
    if film_override is None:
        f_pool = ops.reduce_mean(F_text, axis=1)
        with scope("film_fc1"):
            h1 = ops.linear(f_pool, p["film_fc1.w"], p["film_fc1.b"])
            a1 = ops.gelu(h1)
        with scope("film_fc2"):
            gb = ops.linear(a1, p["film_fc2.w"], p["film_fc2.b"])
        gamma, beta = gb[:, :O], gb[:, O:]
        cache.update(f_pool=f_pool, h1=h1, a1=a1)
    else:
        gamma, beta = (np.asarray(a, dtype=np.float64) for a in film_override)
    scale = (1.0 + gamma)[:, :, None, None]
    F_mod = scale * pre + beta[:, :, None, None]
    cache.update(gamma=gamma, beta=beta)
    return F_mod, gamma, beta, cache


def merge_and_film_backward(d_mod, cache, p: CageParams, cfg: CageConfig, grads: dict):
    """Returns ``(dF_img, d_ctx_ref, dF_text or None)``."""
    gamma = cache["gamma"]
    d_pre = d_mod * (1.0 + gamma)[:, :, None, None]
    d_gamma = (d_mod * cache["pre"]).sum(axis=(2, 3))
    d_beta = d_mod.sum(axis=(2, 3))
    dF_text = None
    if not cache["override"]:
        d_gb = np.concatenate([d_gamma, d_beta], axis=1)
        d_a1, grads["film_fc2.w"], grads["film_fc2.b"] = ops.linear_backward(
            cache["a1"], p["film_fc2.w"], p["film_fc2.b"], d_gb)
        (d_h1,) = ops.gelu_backward(cache["h1"], d_a1)
        d_pool, grads["film_fc1.w"], grads["film_fc1.b"] = ops.linear_backward(
            cache["f_pool"], p["film_fc1.w"], p["film_fc1.b"], d_h1)
        (dF_text,) = ops.reduce_mean_backward(cache["F_text"], 1, d_pool)
    d_cat, grads["merge.w"], grads["merge.b"] = ops.conv1x1_backward(
        cache["cat"], p["merge.w"], p["merge.b"], d_pre)
    c = cache["c_img"]
    return d_cat[:, :c], d_cat[:, c:], dF_text


# ---------------------------------------------------------------------------
# whole block
# ---------------------------------------------------------------------------

@dataclass
class CageActivations:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    attention: np.ndarray  # (B, h, HW, L)
    ctx_map: np.ndarray
    G: np.ndarray
    ctx_ref: np.ndarray
    F_pre_film: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    F_modulated: np.ndarray
    F_res: np.ndarray
    F_out: np.ndarray
    mode: str = "eval"
    caches: dict = field(default_factory=dict, repr=False)
    params_digest: str = ""
    cfg: CageConfig | None = None

    NAMES = ("Q", "K", "V", "attention", "ctx_map", "G", "ctx_ref", "F_pre_film", "gamma",
             "beta", "F_modulated", "F_res", "F_out")

    def statistics(self) -> dict[str, dict[str, float]]:
        """min/max/mean per named activation."""
        return {
            n: {"min": float(np.min(a)), "max": float(np.max(a)), "mean": float(np.mean(a))}
            for n in self.NAMES for a in (getattr(self, n),)
        }


def forward(F_img, F_text, p: CageParams, cfg: CageConfig, mode: str = "eval",
            film_override=None, update_running_stats: bool = True):
    """Run the block.  Returns ``(F_out, CageActivations)``.

    Train mode normalizes with batch statistics and, unless
    ``update_running_stats`` is false, writes the EMA-updated running stats
    back into ``p``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    F_img = np.asarray(F_img, dtype=np.float64)
    F_text = np.asarray(F_text, dtype=np.float64)
    digest = p.weights_digest()
    ctx_map, c_attn = cross_attention_context(F_img, F_text, p, cfg)
    G, c_gate = occlusion_gate(F_img, p, cfg)
    ctx_ref, c_ref = refine_context(ctx_map, G, p, cfg)
    F_mod, gamma, beta, c_film = merge_and_film(F_img, ctx_ref, F_text, p, cfg, film_override)
    bn_out, new_mean, new_var = ops.batch_norm(
        F_mod, p["bn.g"], p["bn.b"], p.running_mean, p.running_var, mode,
        cfg.bn_eps, cfg.bn_momentum)
    if cfg.residual_kind == "projected":
        with scope("residual"):
            F_res = ops.conv1x1(F_img, p["residual.w"], p["residual.b"])
    else:
        F_res = F_img
    F_out = ops.add(F_res, bn_out)
    if mode == "train" and update_running_stats:
        p.running_mean, p.running_var = new_mean, new_var
    acts = CageActivations(
        Q=c_attn["Q"], K=c_attn["K"], V=c_attn["V"], attention=c_attn["attn"],
        ctx_map=ctx_map, G=G, ctx_ref=ctx_ref, F_pre_film=c_film["pre"], gamma=gamma,
        beta=beta, F_modulated=F_mod, F_res=F_res, F_out=F_out, mode=mode,
        caches={"attn": c_attn, "gate": c_gate, "ref": c_ref, "film": c_film,
                "bn_in": F_mod, "bn_mean": new_mean, "bn_var": new_var, "F_img": F_img},
        params_digest=digest,
        cfg=cfg,
    )
    return F_out, acts


# test hook: when set, backward flips the sign of this parameter's gradient
SABOTAGE_PARAM: str | None = None


def backward(upstream, acts: CageActivations, p: CageParams, cfg: CageConfig):
    """Reverse-mode cotangents for all parameters plus ``F_img`` and ``F_text``.

    Returns a dict keyed by parameter name, with extra keys ``"F_img"`` and
    ``"F_text"``.
    """
    if acts.cfg != cfg:
        raise ConsistencyError("activations were produced with a different config")
    if p.weights_digest() != acts.params_digest:
        raise ConsistencyError("activations are stale: params changed since forward")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts.F_out.shape:
        raise ConsistencyError(
            f"upstream shape {upstream.shape} != F_out shape {acts.F_out.shape}")
    c = acts.caches
    grads: dict[str, np.ndarray] = {}
    d_res, d_bn = ops.add_backward(acts.F_res, acts.F_out, upstream)
    if acts.mode == "eval":
        d_mod, grads["bn.g"], grads["bn.b"] = ops.batch_norm_backward(
            c["bn_in"], p["bn.g"], c["bn_mean"], c["bn_var"], d_bn, "eval", cfg.bn_eps)
    else:
        O = cfg.c_out
        d_mod, grads["bn.g"], grads["bn.b"] = ops.batch_norm_backward(
            c["bn_in"], p["bn.g"], np.zeros(O), np.ones(O), d_bn, "train", cfg.bn_eps)
    if cfg.residual_kind == "projected":
        dF_img, grads["residual.w"], grads["residual.b"] = ops.conv1x1_backward(
            c["F_img"], p["residual.w"], p["residual.b"], d_res)
    else:
        dF_img = d_res.copy()
    dx_merge, d_ref, dF_text_film = merge_and_film_backward(d_mod, c["film"], p, cfg, grads)
    dF_img += dx_merge
    d_ctx, dG = refine_context_backward(d_ref, c["ref"], p, cfg, grads)
    dx_gate = occlusion_gate_backward(dG, c["gate"], p, grads)
    if dx_gate is not None:
        dF_img += dx_gate
    dx_attn, dF_text = cross_attention_backward(d_ctx, c["attn"], p, cfg, grads)
    dF_img += dx_attn
    if dF_text_film is not None:
        dF_text = dF_text + dF_text_film
    for name in p.weights:
        if name not in grads:
            # reachable only when FiLM is overridden
            grads[name] = np.zeros_like(p.weights[name])
    if SABOTAGE_PARAM is not None and SABOTAGE_PARAM in grads:
        grads[SABOTAGE_PARAM] = -grads[SABOTAGE_PARAM]
    grads["F_img"] = dF_img
    grads["F_text"] = dF_text
    return grads


# ---------------------------------------------------------------------------
# drop-in contract
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeckLevel:
    name: str
    c_in: int
    c_out: int
    height: int
    width: int
    expected_c_out: int | None = None

    @property
    def expected(self) -> int:
        return self.c_out if self.expected_c_out is None else self.expected_c_out


DEFAULT_NECK = (
    NeckLevel("P3", 128, 128, 80, 80),
    NeckLevel("P4", 256, 256, 40, 40),
    NeckLevel("P5", 512, 512, 20, 20),
)


def level_config(level: NeckLevel, embed_dim: int = 512, heads: int | None = None,
                 proj_dim: int | None = None, **overrides) -> CageConfig:
    """CAGE config for one neck level.

    Attention width defaults to ``c_out // 2``, the text-attention width of
    the CSP block being replaced, with 32 channels per head.
    """
    P = proj_dim or max(1, level.c_out // 2)
    h = heads or max(1, P // 32)
    kind = "identity" if level.c_in == level.c_out else "projected"
    return CageConfig(c_in=level.c_in, c_out=level.c_out, embed_dim=embed_dim, proj_dim=P,
                      heads=h, residual_kind=overrides.pop("residual_kind", kind), **overrides)


@dataclass
class LevelReport:
    level: str
    expected_shape: tuple[int, ...]
    actual_shape: tuple[int, ...]
    params: int
    flops: int

    @property
    def ok(self) -> bool:
        return self.expected_shape == self.actual_shape


def drop_in_check(levels=DEFAULT_NECK, text_len: int = 10, embed_dim: int = 512,
                  batch: int = 1, seed: int = 0, run_forward: bool = True,
                  **cfg_overrides) -> list[LevelReport]:
    """Check that each level's output matches the replaced layer's contract."""
    from . import cost

    rng = np.random.default_rng(seed)
    reports = []
    for level in levels:
        cfg = level_config(level, embed_dim=embed_dim, **dict(cfg_overrides))
        if run_forward:
            p = init_params(cfg, seed)
            x = rng.standard_normal((batch, level.c_in, level.height, level.width))
            t = rng.standard_normal((batch, text_len, embed_dim))
            out, _ = forward(x, t, p, cfg, mode="eval")
            actual = tuple(out.shape)
        else:
            actual = (batch, cfg.c_out, level.height, level.width)
        reports.append(LevelReport(
            level=level.name,
            expected_shape=(batch, level.expected, level.height, level.width),
            actual_shape=actual,
            params=cost.count_params(cfg).total_params,
            flops=cost.count_flops(cfg, level.height, level.width, text_len, batch).total_flops,
        ))
    return reports
