"""Closed-form parameter and FLOP accounting.

Conventions, repeated in every report header:

* MACs count multiply-accumulates of contractions (convolutions, linear
  maps, attention products).  Bias adds and elementwise affine work
  (normalization, gating, FiLM, residual add) are not counted.
* FLOPs = 2 * MACs.
* Nonlinearities (GELU, sigmoid, SiLU, softmax exp) count one op per element
  and are reported separately, never folded into FLOPs.

The formulas here are written out independently of
:func:`cage.fusion.param_shapes`; tests audit them against the allocated
tensors and against :func:`cage.ops.count_ops` on a real forward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .fusion import CageConfig, DEFAULT_NECK, NeckLevel, level_config

CONVENTION = (
    "FLOPs = 2 * MACs; MACs cover contractions only; "
    "nonlinearities counted at 1 op/element, reported separately"
)

# Whole-model L-scale figures from the published comparison, kept as
# reference metadata only.  They are never recomputed here.
PUBLISHED_REFERENCE = {
    "model": "YOLO-World-v2-L (UAV pre-training) vs. same with CAGE",
    "params_M": {"baseline": 48, "cage": 34},
    "gflops": {"baseline": 204.5, "cage": 144.0},
}


@dataclass
class CostRow:
    name: str
    param_count: int = 0
    mac_count: int = 0
    nonlinear_count: int = 0
    tensors: list[str] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return 2 * self.mac_count


@dataclass
class CostReport:
    rows: list[CostRow]
    input_spec: dict
    label: str = "CAGE"
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(r.param_count for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.mac_count for r in self.rows)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def total_nonlinear(self) -> int:
        return sum(r.nonlinear_count for r in self.rows)

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "convention": self.convention,
            "input_spec": self.input_spec,
            "rows": [dict(asdict(r), flops=r.flops) for r in self.rows],
            "totals": {
                "params": self.total_params,
                "macs": self.total_macs,
                "flops": self.total_flops,
                "nonlinear": self.total_nonlinear,
            },
        }


def _cage_rows(cfg: CageConfig, B: int, H: int, W: int, L: int) -> list[CostRow]:
    C, P, D, X, O = cfg.c_in, cfg.proj_dim, cfg.embed_dim, cfg.ctx_channels, cfg.c_out
    Dh, h = cfg.film_hidden, cfg.heads
    S = B * H * W  # pixels across the batch

    def conv1(name, cin, cout, nonlin=0):
        return CostRow(name, cin * cout + cout, S * cin * cout, nonlin,
                       [f"{name}.w", f"{name}.b"])

    rows = [
        conv1("q_proj", C, P),
        CostRow("q_norm", 2 * P, 0, 0, ["q_norm.g", "q_norm.b"]),
        CostRow("text_norm", 2 * D, 0, 0, ["text_norm.g", "text_norm.b"]),
        CostRow("k_proj", D * P, B * L * D * P, 0, ["w_k"]),
        CostRow("v_proj", D * P, B * L * D * P, 0, ["w_v"]),
        # per head HW x d_k x L, summed over h heads -> HW * L * P
        CostRow("attn_scores", 0, S * L * P, B * h * H * W * L),
        CostRow("attn_mix", 0, S * L * P, 0),
    ]
    if cfg.attn_out_proj:
        rows.append(conv1("attn_out", P, P))
    if cfg.gate_enabled:
        rows.append(CostRow("gate_conv3x3", 9 * C * C + C, S * 9 * C * C, S * C,
                            ["gate_conv3x3.w", "gate_conv3x3.b"]))
        rows.append(conv1("gate_conv1x1", C, 1, nonlin=S))
    rows.append(conv1("ctx_proj", P, X))
    for i in range(cfg.dw_units):
        rows.append(CostRow(f"dw{i}.dw", 9 * X + X, S * 9 * X, 0,
                            [f"dw{i}.dw.w", f"dw{i}.dw.b"]))
        rows.append(conv1(f"dw{i}.pw", X, X, nonlin=S * X))
    rows += [
        conv1("merge", C + X, O),
        CostRow("film_fc1", D * Dh + Dh, B * D * Dh, B * Dh, ["film_fc1.w", "film_fc1.b"]),
        CostRow("film_fc2", Dh * 2 * O + 2 * O, B * Dh * 2 * O, 0,
                ["film_fc2.w", "film_fc2.b"]),
    ]
    if cfg.residual_kind == "projected":
        rows.append(conv1("residual", C, O))
    rows.append(CostRow("bn", 2 * O, 0, 0, ["bn.g", "bn.b"]))
    return rows


def count_params(cfg: CageConfig) -> CostReport:
    rows = _cage_rows(cfg, 1, 1, 1, 1)
    for r in rows:
        r.mac_count = r.nonlinear_count = 0
    return CostReport(rows, {"config": cfg.to_dict()})


def count_flops(cfg: CageConfig, H: int, W: int, L: int, B: int = 1) -> CostReport:
    for name, v in (("B", B), ("H", H), ("W", W), ("L", L)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return CostReport(_cage_rows(cfg, B, H, W, L),
                      {"B": B, "H": H, "W": W, "L": L, "D": cfg.embed_dim,
                       "config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# reference baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineSpec:
    """CSP fusion block with two-conv split and max-sigmoid text attention.

    ``mid = round(c_out * expand_ratio)``.  Layers: a 1x1 main conv to
    ``2*mid``, ``n_bottlenecks`` bottlenecks of two 3x3 convs on ``mid``,
    a text-guided attention branch (linear text projection to
    ``embed_channels``, optional 1x1 embed conv, per-head max over tokens,
    sigmoid, 3x3 projection conv) and a 1x1 final conv from
    ``(3 + n) * mid`` channels.  Convs carry batch norm (2 params per
    channel) and no bias.
    """

    c_in: int
    c_out: int
    embed_dim: int = 512
    n_bottlenecks: int = 3
    expand_ratio: float = 0.5
    embed_channels: int | None = None
    num_heads: int | None = None

    @property
    def mid(self) -> int:
        return max(1, int(round(self.c_out * self.expand_ratio)))

    @property
    def embed(self) -> int:
        return self.embed_channels or self.mid

    @property
    def heads(self) -> int:
        return self.num_heads or max(1, self.embed // 32)


def baseline_flops(spec: BaselineSpec, H: int, W: int, L: int, B: int = 1) -> CostReport:
    S = B * H * W
    m, E, G = spec.mid, spec.embed, spec.embed_dim

    def convbn(name, cin, cout, k, act=True):
        return CostRow(name, k * k * cin * cout + 2 * cout, S * k * k * cin * cout,
                       S * cout if act else 0)

    rows = [convbn("main_conv", spec.c_in, 2 * m, 1)]
    for i in range(spec.n_bottlenecks):
        rows.append(convbn(f"bottleneck{i}.conv1", m, m, 3))
        rows.append(convbn(f"bottleneck{i}.conv2", m, m, 3))
    rows.append(CostRow("attn.guide_fc", G * E + E, B * L * G * E, 0))
    if m != E:
        rows.append(convbn("attn.embed_conv", m, E, 1, act=False))
    rows.append(CostRow("attn.scores", spec.heads, S * E * L, S * spec.heads))
    rows.append(convbn("attn.project_conv", m, m, 3, act=False))
    rows.append(convbn("final_conv", (3 + spec.n_bottlenecks) * m, spec.c_out, 1))
    return CostReport(rows, {"B": B, "H": H, "W": W, "L": L, "D": G,
                             "baseline": asdict(spec)}, label="reference baseline")


@dataclass
class Comparison:
    level: str
    cage: CostReport
    baseline: CostReport

    @staticmethod
    def _delta(new: int, old: int) -> float:
        return 0.0 if new == old else 100.0 * (new - old) / old

    @property
    def param_delta_pct(self) -> float:
        return self._delta(self.cage.total_params, self.baseline.total_params)

    @property
    def flop_delta_pct(self) -> float:
        return self._delta(self.cage.total_flops, self.baseline.total_flops)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "cage": {"params": self.cage.total_params, "flops": self.cage.total_flops},
            "baseline": {"params": self.baseline.total_params,
                         "flops": self.baseline.total_flops},
            "param_delta_pct": self.param_delta_pct,
            "flop_delta_pct": self.flop_delta_pct,
        }


def compare_reports(level: str, a: CostReport, b: CostReport) -> Comparison:
    return Comparison(level, a, b)


def compare_baseline(levels=DEFAULT_NECK, text_len: int = 10, embed_dim: int = 512,
                     batch: int = 1, n_bottlenecks: int = 3, expand_ratio: float = 0.5,
                     **cfg_overrides) -> dict:
    """Per-level and summed CAGE vs. reference-baseline costs."""
    comps = []
    for level in levels:
        cfg = level_config(level, embed_dim=embed_dim, **dict(cfg_overrides))
        spec = BaselineSpec(level.c_in, level.c_out, embed_dim, n_bottlenecks, expand_ratio)
        comps.append(Comparison(
            level.name,
            count_flops(cfg, level.height, level.width, text_len, batch),
            baseline_flops(spec, level.height, level.width, text_len, batch),
        ))
    cage_p = sum(c.cage.total_params for c in comps)
    base_p = sum(c.baseline.total_params for c in comps)
    cage_f = sum(c.cage.total_flops for c in comps)
    base_f = sum(c.baseline.total_flops for c in comps)
    return {
        "convention": CONVENTION,
        "baseline_label": "reference baseline",
        "levels": [c.to_dict() for c in comps],
        "totals": {
            "cage": {"params": cage_p, "flops": cage_f},
            "baseline": {"params": base_p, "flops": base_f},
            "param_delta_pct": Comparison._delta(cage_p, base_p),
            "flop_delta_pct": Comparison._delta(cage_f, base_f),
        },
        "published_reference": PUBLISHED_REFERENCE,
        "comparisons": comps,
    }


def format_table(report: CostReport) -> str:
    """Aligned text table of one report."""
    head = f"{'layer':<18}{'params':>12}{'MACs':>16}{'FLOPs':>16}{'nonlin':>12}"
    lines = [f"# {report.label}: {report.convention}", head, "-" * len(head)]
    for r in report.rows:
        lines.append(f"{r.name:<18}{r.param_count:>12,}{r.mac_count:>16,}"
                     f"{r.flops:>16,}{r.nonlinear_count:>12,}")
    lines.append("-" * len(head))
    lines.append(f"{'total':<18}{report.total_params:>12,}{report.total_macs:>16,}"
                 f"{report.total_flops:>16,}{report.total_nonlinear:>12,}")
    return "\n".join(lines)


__all__ = [
    "BaselineSpec", "Comparison", "CostReport", "CostRow", "NeckLevel", "PUBLISHED_REFERENCE",
    "baseline_flops", "compare_baseline", "count_flops", "count_params", "format_table",
]
