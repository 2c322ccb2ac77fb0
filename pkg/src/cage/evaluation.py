"""COCO-style AP50 / mAP for zero-shot detection runs.

Protocol:

* detections under ``score_floor`` (default 0.001) are dropped first;
* per image and category, detections are matched greedily in descending
  score order (ties keep input order) to the unmatched ground truth with
  the highest IoU >= threshold; regular boxes are preferred over
  ignore-flagged ones, and a detection matched to an ignored box is
  excluded from the PR curve;
* per category, detections of all images are pooled and AP is the
  101-point interpolated area under the PR curve;
* AP50 is the category mean at IoU 0.50, mAP the mean over IoU 0.50:0.05:0.95.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# k/100 rounded once, so "recall >= r" means exactly k/100
IOU_THRESHOLDS = (50 + 5 * np.arange(10)) / 100
RECALL_GRID = np.arange(101) / 100
DEFAULT_SCORE_FLOOR = 0.001

TP, FP, IGNORED = 1, 0, -1


class EvaluationDomainError(ValueError):
    """There is nothing to evaluate against."""


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: str
    bbox: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        _check_box(self.bbox)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    category: str
    bbox: tuple[float, float, float, float]
    ignore: bool = False

    def __post_init__(self):
        _check_box(self.bbox)


def _check_box(b) -> None:
    if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
        raise ValueError(f"invalid box {b!r}, want [x1, y1, x2, y2] with x1<x2, y1<y2")


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_thr: float) -> list[int]:
    """TP/FP/IGNORED flag per detection, in the order given.

    ``dets`` must already be sorted by descending score.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou, best_ign = -1, iou_thr, True
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = iou(d.bbox, g.bbox)
            if v < iou_thr:
                continue
            # a regular box always beats an ignored one; otherwise higher IoU wins
            if best == -1 or (best_ign and not g.ignore) or (
                    best_ign == g.ignore and v > best_iou):
                best, best_iou, best_ign = j, v, g.ignore
        if best == -1:
            flags.append(FP)
        else:
            used[best] = True
            flags.append(IGNORED if best_ign else TP)
    return flags


def average_precision(flags: Sequence[int], scores: Sequence[float], n_gt: int) -> float | None:
    """101-point interpolated AP; ``None`` when undefined (no gt, no detections).

    IGNORED flags are dropped before building the curve.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    f = np.asarray(flags, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    keep = f != IGNORED
    f, s = f[keep], s[keep]
    if n_gt == 0:
        return None if f.size == 0 else 0.0
    if f.size == 0:
        return 0.0
    order = np.argsort(-s, kind="mergesort")
    tp = np.cumsum(f[order] == TP)
    fp = np.cumsum(f[order] == FP)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max over everything to the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(interp.mean())


@dataclass
class EvalResult:
    ap50: float
    map: float
    per_category: dict[str, list[float | None]]  # AP per IoU threshold
    thresholds: list[float]
    curves: dict[str, tuple[np.ndarray, np.ndarray]]  # category -> (recall, precision) @0.5

    def to_dict(self) -> dict:
        return {
            "AP50": self.ap50,
            "mAP": self.map,
            "iou_thresholds": self.thresholds,
            "per_category": self.per_category,
            "protocol": "COCO 101-point interpolation, IoU 0.50:0.05:0.95",
        }


def _sorted_dets(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable: ties keep input order


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth],
             score_floor: float = DEFAULT_SCORE_FLOOR,
             categories: Sequence[str] | None = None,
             iou_thresholds: Sequence[float] = tuple(IOU_THRESHOLDS),
             max_dets: int | None = None) -> EvalResult:
    """AP50 and mAP over the category vocabulary.

    ``categories`` is the text-prompt class list; by default it is every
    category seen in ``gts`` or ``dets``.  Categories whose AP is undefined
    (no ground truth, no detections) are left out of the means.
    """
    n_regular = sum(1 for g in gts if not g.ignore)
    if n_regular == 0:
        raise EvaluationDomainError("ground truth is empty")
    if categories is None:
        categories = sorted({g.category for g in gts} | {d.category for d in dets})
    else:
        vocab = set(categories)
        stray = sorted({x.category for x in (*dets, *gts)} - vocab)
        if stray:
            raise ValueError(f"categories outside the prompt vocabulary: {stray}")
    kept = [d for d in dets if d.score >= score_floor]

    by_key_d: dict[tuple[str, str], list[Detection]] = {}
    by_key_g: dict[tuple[str, str], list[GroundTruth]] = {}
    for d in kept:
        by_key_d.setdefault((d.image_id, d.category), []).append(d)
    for g in gts:
        by_key_g.setdefault((g.image_id, g.category), []).append(g)
    images = sorted({k[0] for k in by_key_d} | {k[0] for k in by_key_g})

    per_cat: dict[str, list[float | None]] = {}
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for cat in categories:
        n_gt = sum(1 for g in gts if g.category == cat and not g.ignore)
        aps: list[float | None] = []
        for t in iou_thresholds:
            flags: list[int] = []
            scores: list[float] = []
            for img in images:
                ds = _sorted_dets(by_key_d.get((img, cat), []))
                if max_dets is not None:
                    ds = ds[:max_dets]
                flags += match_detections(ds, by_key_g.get((img, cat), []), t)
                scores += [d.score for d in ds]
            aps.append(average_precision(flags, scores, n_gt))
            if abs(t - 0.5) < 1e-12:
                curves[cat] = pr_curve(flags, scores, n_gt)
        per_cat[cat] = aps

    means = []
    for k in range(len(iou_thresholds)):
        vals = [v[k] for v in per_cat.values() if v[k] is not None]
        means.append(float(np.mean(vals)) if vals else 0.0)
    thr = [float(t) for t in iou_thresholds]
    i50 = next((i for i, t in enumerate(thr) if abs(t - 0.5) < 1e-12), 0)
    return EvalResult(means[i50], float(np.mean(means)), per_cat, thr, curves)


def pr_curve(flags, scores, n_gt) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(flags, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    keep = f != IGNORED
    f, s = f[keep], s[keep]
    if f.size == 0 or n_gt == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-s, kind="mergesort")
    tp = np.cumsum(f[order] == TP)
    fp = np.cumsum(f[order] == FP)
    return tp / n_gt, tp / (tp + fp)


def read_jsonl(path: str | os.PathLike, kind: str):
    """Parse detections (``kind="det"``) or ground truth (``kind="gt"``)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                box = tuple(float(v) for v in r["bbox"])
                if kind == "det":
                    out.append(Detection(str(r["image_id"]), str(r["category"]), box,
                                         float(r["score"])))
                else:
                    out.append(GroundTruth(str(r["image_id"]), str(r["category"]), box,
                                           bool(r.get("ignore", False))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
