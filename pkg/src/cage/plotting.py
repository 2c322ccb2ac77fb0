"""Report figures written next to the JSON/CSV outputs."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no timestamps in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_cost_comparison(comparison: dict, path: str | os.PathLike) -> Path:
    """Grouped bars of params and GFLOPs per neck level, CAGE vs. baseline."""
    levels = comparison["levels"]
    names = [lv["level"] for lv in levels]
    x = np.arange(len(names))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for ax, key, scale, label in ((axes[0], "params", 1e6, "params (M)"),
                                      (axes[1], "flops", 1e9, "GFLOPs")):
            cage = [lv["cage"][key] / scale for lv in levels]
            base = [lv["baseline"][key] / scale for lv in levels]
            ax.bar(x - 0.2, base, 0.4, label=comparison.get("baseline_label", "baseline"),
                   color="0.65")
            ax.bar(x + 0.2, cage, 0.4, label="CAGE", color="tab:blue")
            ax.set_xticks(x, names)
            ax.set_ylabel(label)
        axes[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_cost_breakdown(report, path: str | os.PathLike) -> Path:
    """Horizontal bars of per-layer FLOPs for one report."""
    rows = [r for r in report.rows if r.mac_count]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 0.25 * len(rows) + 1.0))
        ax.barh([r.name for r in rows], [r.flops / 1e9 for r in rows], color="tab:blue")
        ax.invert_yaxis()
        ax.set_xlabel("GFLOPs")
        ax.set_title(report.label)
        fig.tight_layout()
        return _save(fig, path)


def plot_pr_curves(result, path: str | os.PathLike) -> Path:
    """Precision-recall at IoU 0.50, one line per category."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        for cat in sorted(result.curves):
            rec, prec = result.curves[cat]
            if rec.size:
                ax.step(rec, prec, where="post", label=cat)
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"AP50 = {result.ap50:.3f}, mAP = {result.map:.3f}")
        if result.curves:
            ax.legend(frameon=False, loc="lower left")
        fig.tight_layout()
        return _save(fig, path)
