"""Axis-aligned box arithmetic and detection-set geometry.

- Box / GroundTruthObject / Detection / MatchAssignment value types
- iou: intersection over union in continuous coordinates
- match_default_boxes: per-anchor argmax matching against ground truth
- object_detected: class-conditioned hit test for one annotated object
- nms: greedy per-class non-maximum suppression

All functions are pure and safe to call concurrently.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Center-format box (cx, cy, w, h) in image units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form."""
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object: class id in {1..C} plus a unique dataset-wide index."""

    cls: int
    box: Box
    object_index: int

    def __post_init__(self):
        if self.cls < 1:
            raise ValueError(f"object class must be >= 1 (0 is background), got {self.cls}")


@dataclass(frozen=True)
class Detection:
    """One predicted object with a confidence score in [0, 1]."""

    cls: int
    score: float
    box: Box

    def __post_init__(self):
        if self.cls < 1:
            raise ValueError(f"detection class must be >= 1, got {self.cls}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class MatchAssignment:
    """Anchor-to-object assignment: positive iff a matched object exists."""

    sample_index: int
    matched_object: Optional[int]
    is_positive: bool

    def __post_init__(self):
        if self.is_positive != (self.matched_object is not None):
            raise ValueError("is_positive must mirror matched_object presence")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]. Disjoint boxes give 0."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner values as the intersection, so identical
    # boxes give exactly 1.0 and rounding can never push the ratio above 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def match_default_boxes(
    defaults: Sequence[Box],
    gts: Sequence[GroundTruthObject],
    tau: float,
) -> list[MatchAssignment]:
    """Assign each default box to its highest-IoU object iff that IoU >= tau.

    Each default box matches at most one object (the argmax); ties break on
    the lower object_index. An empty ground-truth list yields all negatives.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"match threshold must lie in (0, 1), got {tau}")
    if not defaults:
        raise ValueError("default box list must be non-empty")
    ordered = sorted(gts, key=lambda g: g.object_index)
    out: list[MatchAssignment] = []
    for i, d in enumerate(defaults):
        best_iou = 0.0
        best_obj: Optional[int] = None
        for gt in ordered:
            v = iou(d, gt.box)
            if v > best_iou:
                best_iou = v
                best_obj = gt.object_index
        if best_obj is not None and best_iou >= tau:
            out.append(MatchAssignment(i, best_obj, True))
        else:
            out.append(MatchAssignment(i, None, False))
    return out


def object_detected(
    gt: GroundTruthObject,
    detections: Iterable[Detection],
    theta: float = 0.5,
) -> bool:
    """True iff some detection shares the object's class and overlaps it at >= theta."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    return any(d.cls == gt.cls and iou(gt.box, d.box) >= theta for d in detections)


def _nms_sort_key(d: Detection):
    # Descending score, then ascending geometry for a total deterministic order.
    return (-d.score, d.box.cx, d.box.cy, d.box.w, d.box.h)


def nms(detections: Sequence[Detection], iou_thr: float) -> list[Detection]:
    """Greedy per-class suppression.

    Repeatedly keeps the highest-score detection and drops same-class
    detections overlapping it at IoU >= iou_thr. Output is ordered by
    descending score with ties broken on (score, cx, cy, w, h).
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    kept: list[Detection] = []
    for cls in sorted({d.cls for d in detections}):
        pool = sorted((d for d in detections if d.cls == cls), key=_nms_sort_key)
        n = len(pool)
        if n == 1:
            kept.extend(pool)
            continue
        # same arithmetic as iou(), vectorized over the pool
        w = np.array([d.box.w for d in pool])
        h = np.array([d.box.h for d in pool])
        cx = np.array([d.box.cx for d in pool])
        cy = np.array([d.box.cy for d in pool])
        x1, x2 = cx - w / 2.0, cx + w / 2.0
        y1, y2 = cy - h / 2.0, cy + h / 2.0
        area = (x2 - x1) * (y2 - y1)
        alive = np.ones(n, dtype=bool)
        for i in range(n):
            if not alive[i]:
                continue
            kept.append(pool[i])
            rest = alive.copy()
            rest[: i + 1] = False
            j = np.flatnonzero(rest)
            if j.size == 0:
                continue
            iw = np.minimum(x2[i], x2[j]) - np.maximum(x1[i], x1[j])
            ih = np.minimum(y2[i], y2[j]) - np.maximum(y1[i], y1[j])
            inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
            overlap = inter / (area[i] + area[j] - inter)
            alive[j[overlap >= iou_thr]] = False
    kept.sort(key=_nms_sort_key)
    return kept


# --- detection / annotation list files -------------------------------------
#
# Detections: JSON array of {image_id, cls, score, cx, cy, w, h}
# Annotations: JSON array of {image_id, object_index, cls, cx, cy, w, h}


def detections_to_records(per_image: dict[str, Sequence[Detection]]) -> list[dict]:
    recs = []
    for image_id in sorted(per_image):
        for d in per_image[image_id]:
            recs.append(
                {
                    "image_id": image_id,
                    "cls": d.cls,
                    "score": d.score,
                    "cx": d.box.cx,
                    "cy": d.box.cy,
                    "w": d.box.w,
                    "h": d.box.h,
                }
            )
    return recs


def detections_from_records(records: Iterable[dict]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for r in records:
        det = Detection(int(r["cls"]), float(r["score"]), Box(float(r["cx"]), float(r["cy"]), float(r["w"]), float(r["h"])))
        out.setdefault(str(r["image_id"]), []).append(det)
    return out


def annotations_to_records(per_image: dict[str, Sequence[GroundTruthObject]]) -> list[dict]:
    recs = []
    for image_id in sorted(per_image):
        for g in per_image[image_id]:
            recs.append(
                {
                    "image_id": image_id,
                    "object_index": g.object_index,
                    "cls": g.cls,
                    "cx": g.box.cx,
                    "cy": g.box.cy,
                    "w": g.box.w,
                    "h": g.box.h,
                }
            )
    return recs


def annotations_from_records(records: Iterable[dict]) -> dict[str, list[GroundTruthObject]]:
    out: dict[str, list[GroundTruthObject]] = {}
    for r in records:
        gt = GroundTruthObject(
            int(r["cls"]),
            Box(float(r["cx"]), float(r["cy"]), float(r["w"]), float(r["h"])),
            int(r["object_index"]),
        )
        out.setdefault(str(r["image_id"]), []).append(gt)
    return out


def save_detections(path, per_image: dict[str, Sequence[Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(detections_to_records(per_image), fh, indent=1)


def load_detections(path) -> dict[str, list[Detection]]:
    with open(path, encoding="utf-8") as fh:
        return detections_from_records(json.load(fh))


def save_annotations(path, per_image: dict[str, Sequence[GroundTruthObject]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(annotations_to_records(per_image), fh, indent=1)


def load_annotations(path) -> dict[str, list[GroundTruthObject]]:
    with open(path, encoding="utf-8") as fh:
        return annotations_from_records(json.load(fh))
