"""Label engine for partially annotated UAV datasets.

Three clean-up stages plus caption prompting:

1. drop near-duplicate frames by embedding cosine similarity,
2. convert rotated boxes and polygons to axis-aligned boxes,
3. plan and merge fine-grained re-classification of ambiguous labels,

and :func:`build_caption_prompt`, which turns a box list into a
position-aware captioning prompt.

Pixel origin is top-left with y pointing down.  Angles are radians,
counter-clockwise from +x.  Normalized coordinates live in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
import os
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np


class DegenerateEmbeddingError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class ProtocolError(ValueError):
    """A classifier response does not correspond to any planned job."""


# ---------------------------------------------------------------------------
# frame deduplication
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    sequence_index: int
    embedding: np.ndarray


@dataclass(frozen=True)
class DropEntry:
    dropped_id: str
    anchor_id: str
    similarity: float

    def to_dict(self) -> dict:
        return {"dropped_id": self.dropped_id, "anchor_id": self.anchor_id,
                "similarity": self.similarity}


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def dedup_frames(frames: Sequence[FrameRecord], tau: float = 0.95):
    """Sweep frames in order and drop those too similar to the last kept one.

    A frame is dropped when its similarity to the anchor is strictly greater
    than ``tau``.  The first frame is always kept.  Returns
    ``(kept_ids, drop_log)``.
    """
    if not -1.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (-1, 1], got {tau}")
    for prev, cur in zip(frames, frames[1:]):
        if cur.sequence_index <= prev.sequence_index:
            raise ValueError(
                f"frames not strictly increasing: {prev.frame_id}@{prev.sequence_index} "
                f"then {cur.frame_id}@{cur.sequence_index}"
            )
    kept: list[str] = []
    drops: list[DropEntry] = []
    anchor: FrameRecord | None = None
    for frame in frames:
        if anchor is None:
            cosine_similarity(frame.embedding, frame.embedding)  # rejects zero norm
            anchor = frame
            kept.append(frame.frame_id)
            continue
        sim = cosine_similarity(anchor.embedding, frame.embedding)
        if sim > tau:
            drops.append(DropEntry(frame.frame_id, anchor.frame_id, sim))
        else:
            anchor = frame
            kept.append(frame.frame_id)
    return kept, drops


def read_embeddings(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load ``{frame_id, dim, values}`` JSONL records (values stored as f32)."""
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            values = np.asarray(rec["values"], dtype=np.float32)
            if values.ndim != 1 or values.size != int(rec["dim"]):
                raise ManifestError(
                    f"{path}:{lineno}: frame {rec['frame_id']} has {values.size} values, "
                    f"dim says {rec['dim']}"
                )
            out[str(rec["frame_id"])] = values.astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AABB:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateGeometryError(f"empty box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_dict(self) -> dict:
        return {"type": "aabb", "x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max}


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateGeometryError(f"rotated box needs w, h > 0: {self}")
        if not -math.pi <= self.theta < math.pi:
            raise ValueError(f"theta must lie in [-pi, pi), got {self.theta}")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        half = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * [self.w / 2, self.h / 2]
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + [self.cx, self.cy]

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"type": "rbox", "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h,
                "theta": self.theta}


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateGeometryError(f"polygon needs >= 3 vertices, got {len(self.vertices)}")

    def to_dict(self) -> dict:
        return {"type": "poly", "points": [list(v) for v in self.vertices]}


Geometry = AABB | RotatedBox | Polygon


def wrap_angle(theta: float) -> float:
    """Map any angle to [-pi, pi)."""
    return (theta + math.pi) % (2 * math.pi) - math.pi


def geometry_from_dict(d: Mapping) -> Geometry:
    kind = d.get("type")
    if kind == "aabb":
        return AABB(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))
    if kind == "rbox":
        theta = float(d["theta"])
        if d.get("degrees"):
            theta = math.radians(theta)
        return RotatedBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]),
                          wrap_angle(theta))
    if kind == "poly":
        return Polygon(tuple((float(x), float(y)) for x, y in d["points"]))
    raise ManifestError(f"unknown geometry type {kind!r}")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    category: str
    geometry: Geometry
    ann_id: str | None = None

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "category": self.category,
             "geometry": self.geometry.to_dict()}
        if self.ann_id is not None:
            d["id"] = self.ann_id
        return d


def normalize_annotation(ann: AnnotationRecord) -> AnnotationRecord:
    """Replace the geometry with its axis-aligned bounding box."""
    g = ann.geometry
    if isinstance(g, AABB):
        return ann
    if isinstance(g, RotatedBox):
        pts = g.corners()
    else:
        pts = np.asarray(g.vertices, dtype=np.float64)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    if not (x0 < x1 and y0 < y1):
        src = ann.ann_id if ann.ann_id is not None else f"{ann.image_id}/{ann.category}"
        raise DegenerateGeometryError(f"annotation {src}: zero-area box after conversion")
    return replace(ann, geometry=AABB(float(x0), float(y0), float(x1), float(y1)))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

ROUTES = ("FOD", "FOP", "COD")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: int | None = None
    height: int | None = None
    sequence: str | None = None
    seq_index: int | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "width": self.width, "height": self.height}
        if self.sequence is not None:
            d["sequence"] = self.sequence
        if self.seq_index is not None:
            d["seq_index"] = self.seq_index
        return d


@dataclass
class DatasetManifest:
    dataset: str
    route: str
    images: list[ImageRecord]
    annotations: list[AnnotationRecord]
    embedding_files: list[str] = field(default_factory=list)
    ambiguous_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.route not in ROUTES:
            raise ManifestError(f"route must be one of {ROUTES}, got {self.route!r}")
        ids = {im.id for im in self.images}
        if len(ids) != len(self.images):
            raise ManifestError("duplicate image ids")
        for i, a in enumerate(self.annotations):
            if a.image_id not in ids:
                raise ManifestError(f"annotation {i} refers to unknown image {a.image_id!r}")

    def image(self, image_id: str) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise ManifestError(f"unknown image {image_id!r}")

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "route": self.route,
            "images": [im.to_dict() for im in self.images],
            "annotations": [a.to_dict() for a in self.annotations],
        }
        if self.embedding_files:
            d["embeddings"] = list(self.embedding_files)
        if self.ambiguous_labels:
            d["ambiguous_labels"] = list(self.ambiguous_labels)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        try:
            images = [
                ImageRecord(str(im["id"]), im.get("width"), im.get("height"),
                            im.get("sequence"), im.get("seq_index"))
                for im in d["images"]
            ]
            anns = [
                AnnotationRecord(str(a["image_id"]), str(a["category"]),
                                 geometry_from_dict(a["geometry"]),
                                 None if a.get("id") is None else str(a["id"]))
                for a in d["annotations"]
            ]
            return cls(str(d["dataset"]), str(d["route"]), images, anns,
                       list(d.get("embeddings", [])), list(d.get("ambiguous_labels", [])))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def normalize_manifest(manifest: DatasetManifest) -> DatasetManifest:
    return replace(manifest, annotations=[normalize_annotation(a) for a in manifest.annotations])


def dedup_manifest(manifest: DatasetManifest, embeddings: Mapping[str, np.ndarray],
                   tau: float = 0.95):
    """Deduplicate each image sequence; returns ``(manifest, drop_log)``.

    Images without a ``sequence`` are never compared with anything.
    """
    groups: dict[str, list[ImageRecord]] = {}
    for im in manifest.images:
        if im.sequence is not None:
            groups.setdefault(im.sequence, []).append(im)
    dropped: set[str] = set()
    log: list[DropEntry] = []
    for seq in sorted(groups):
        ims = sorted(groups[seq], key=lambda im: im.seq_index)
        missing = [im.id for im in ims if im.id not in embeddings]
        if missing:
            raise ManifestError(f"no embedding for frames {missing}")
        frames = [FrameRecord(im.id, int(im.seq_index), embeddings[im.id]) for im in ims]
        _, drops = dedup_frames(frames, tau)
        log.extend(drops)
        dropped.update(d.dropped_id for d in drops)
    return replace(
        manifest,
        images=[im for im in manifest.images if im.id not in dropped],
        annotations=[a for a in manifest.annotations if a.image_id not in dropped],
    ), log


# ---------------------------------------------------------------------------
# re-classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReclassJob:
    job_id: str
    annotation_index: int
    image_id: str
    crop: tuple[float, float, float, float]
    original_label: str
    status: str = "pending"
    new_label: str | None = None

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "annotation_index": self.annotation_index,
                "image_id": self.image_id, "crop": list(self.crop),
                "original_label": self.original_label, "status": self.status,
                "new_label": self.new_label}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReclassJob":
        return cls(str(d["job_id"]), int(d["annotation_index"]), str(d["image_id"]),
                   tuple(float(v) for v in d["crop"]), str(d["original_label"]),
                   d.get("status", "pending"), d.get("new_label"))


def crop_rect(box: AABB, width: float, height: float, margin: float):
    """Normalized box grown by ``margin`` times its size per side, clipped to [0, 1]."""
    x0, x1 = box.x_min / width, box.x_max / width
    y0, y1 = box.y_min / height, box.y_max / height
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    clip = lambda v: min(1.0, max(0.0, v))  # noqa: E731
    return (clip(x0 - mx), clip(y0 - my), clip(x1 + mx), clip(y1 + my))


def plan_reclassification(manifest: DatasetManifest, ambiguous_labels: Iterable[str],
                          margin: float = 0.1) -> list[ReclassJob]:
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    wanted = set(ambiguous_labels)
    jobs = []
    for i, ann in enumerate(manifest.annotations):
        if ann.category not in wanted:
            continue
        im = manifest.image(ann.image_id)
        if not im.width or not im.height:
            raise ManifestError(f"image {im.id!r} has no usable width/height")
        box = normalize_annotation(ann).geometry
        jobs.append(ReclassJob(f"{ann.image_id}#{i}", i, ann.image_id,
                               crop_rect(box, im.width, im.height, margin), ann.category))
    return jobs


@dataclass(frozen=True)
class Rejection:
    job_id: str
    response: str
    reason: str

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "response": self.response, "reason": self.reason}


def apply_reclassification(manifest: DatasetManifest, jobs: Sequence[ReclassJob],
                           responses: Mapping[str, str], allowed: Iterable[str] | None = None):
    """Merge classifier answers into the manifest.

    ``allowed=None`` means an open vocabulary.  Returns
    ``(manifest, jobs, rejections)``; rejected jobs keep their original label.
    """
    by_id = {j.job_id: j for j in jobs}
    unknown = sorted(set(responses) - set(by_id))
    if unknown:
        raise ProtocolError(f"responses for unknown jobs: {unknown}")
    vocab = None if allowed is None else set(allowed)
    anns = list(manifest.annotations)
    out_jobs, rejections = [], []
    for job in jobs:
        if job.job_id not in responses:
            out_jobs.append(job)
            continue
        label = str(responses[job.job_id]).strip()
        if not label:
            reason = "empty response"
        elif vocab is not None and label not in vocab:
            reason = "label outside allowed vocabulary"
        else:
            reason = ""
        if reason:
            rejections.append(Rejection(job.job_id, label, reason))
            out_jobs.append(replace(job, status="rejected"))
            continue
        anns[job.annotation_index] = replace(anns[job.annotation_index], category=label)
        out_jobs.append(replace(job, status="resolved", new_label=label))
    return replace(manifest, annotations=anns), out_jobs, rejections


class Classifier(Protocol):
    def classify(self, job: ReclassJob, candidates: Sequence[str]) -> str: ...


def classification_request(job: ReclassJob, candidates: Sequence[str]) -> dict:
    """Wire body sent to a classifier service."""
    return {"job_id": job.job_id, "image_id": job.image_id, "crop": list(job.crop),
            "label": job.original_label, "candidates": list(candidates)}


class MockClassifier:
    """Deterministic lookup: original label (or job id) -> new label."""

    def __init__(self, lookup: Mapping[str, str]):
        self.lookup = dict(lookup)

    def classify(self, job: ReclassJob, candidates: Sequence[str]) -> str:
        if job.job_id in self.lookup:
            return self.lookup[job.job_id]
        return self.lookup.get(job.original_label, job.original_label)


class HttpClassifier:
    """POSTs the request JSON; expects ``{"label": ...}`` back.

    Endpoint and bearer token come from ``CAGE_CLASSIFIER_URL`` and
    ``CAGE_CLASSIFIER_TOKEN``.
    """

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get("CAGE_CLASSIFIER_URL")
        if not self.url:
            raise ValueError("classifier endpoint not configured (CAGE_CLASSIFIER_URL)")
        self.token = token if token is not None else os.environ.get("CAGE_CLASSIFIER_TOKEN")
        self.timeout = timeout

    def classify(self, job: ReclassJob, candidates: Sequence[str]) -> str:
        body = json.dumps(classification_request(job, candidates)).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode())
        if "label" not in payload:
            raise ProtocolError(f"classifier reply for {job.job_id} lacks 'label'")
        return str(payload["label"])


def run_classifier(jobs: Sequence[ReclassJob], client: Classifier,
                   candidates: Sequence[str] = ()) -> dict[str, str]:
    return {j.job_id: client.classify(j, candidates) for j in jobs if j.status == "pending"}


# ---------------------------------------------------------------------------
# caption prompts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Region names row-major from the top-left, and the two cut points per axis."""

    names: tuple[tuple[str, str, str], ...] = (
        ("top-left", "top-center", "top-right"),
        ("center-left", "center", "center-right"),
        ("bottom-left", "bottom-center", "bottom-right"),
    )
    cuts: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)

    def region(self, x: float, y: float) -> str:
        return self.names[self._bin(y)][self._bin(x)]

    def _bin(self, v: float) -> int:
        lo, hi = self.cuts
        return 0 if v < lo else (1 if v < hi else 2)


DEFAULT_GRID = Grid()

PROMPT_HEADER = (
    "You are given an aerial image taken from a UAV together with a list of "
    "annotated objects.\n"
    "Write a detailed caption of the image. Describe object types, object actions, "
    "precise object locations, and any texts visible in the scene, and double-check "
    "the relative positions between objects.\n"
    "Small objects are common in this viewpoint: describe small-scale objects in "
    "detail and keep descriptions of large background regions brief.\n"
)


def build_caption_prompt(image_id: str, annotations: Sequence[AnnotationRecord],
                         grid: Grid = DEFAULT_GRID) -> str:
    """Prompt text for one image.  Boxes must already be normalized AABBs."""
    lines = [PROMPT_HEADER, f"Image: {image_id}", "Annotated objects:"]
    objects = [a for a in annotations if a.image_id == image_id]
    for a in objects:
        if not isinstance(a.geometry, AABB):
            raise DegenerateGeometryError("caption prompts need AABB geometry")
        cx, cy = a.geometry.center
        lines.append(f"- {a.category} at the {grid.region(cx, cy)}")
    if not objects:
        lines.append("- (none)")
    return "\n".join(lines) + "\n"


def normalized_annotations(manifest: DatasetManifest, image_id: str) -> list[AnnotationRecord]:
    """AABBs of one image scaled to [0, 1] by the image size."""
    im = manifest.image(image_id)
    if not im.width or not im.height:
        raise ManifestError(f"image {image_id!r} has no usable width/height")
    out = []
    for a in manifest.annotations:
        if a.image_id != image_id:
            continue
        b = normalize_annotation(a).geometry
        out.append(replace(a, geometry=AABB(b.x_min / im.width, b.y_min / im.height,
                                            b.x_max / im.width, b.y_max / im.height)))
    return out


def caption_prompts(manifest: DatasetManifest, grid: Grid = DEFAULT_GRID) -> dict[str, str]:
    return {im.id: build_caption_prompt(im.id, normalized_annotations(manifest, im.id), grid)
            for im in manifest.images}


def write_jsonl(path: str | os.PathLike, records: Iterable[dict], append: bool = True) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
