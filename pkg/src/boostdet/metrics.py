"""Detection-quality metrics: AP / mAP, PR curves, size bins, FP taxonomy.

Matching follows the usual single-match rule: detections are visited in
descending score order and each ground-truth object can satisfy at most one
detection; duplicates of an already-matched object count as false positives.

average_precision defaults to all-point interpolation (area under the
monotonized PR envelope); the raw (non-monotonized) precision sum is
available via monotonize=False.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box, Detection, GroundTruthObject, iou

SIZE_BIN_NAMES = ("XS", "S", "M", "L", "XL")
SIZE_BIN_QUANTILES = (0.10, 0.30, 0.70, 0.90)
FP_CATEGORIES = ("Loc", "Sim", "BG", "Oth")
LOC_IOU_LOW = 0.1  # below this a detection has no meaningful overlap


@dataclass(frozen=True)
class PRCurve:
    cls: int
    thresholds: tuple[float, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]


@dataclass(frozen=True)
class SizeBinning:
    edges: tuple[float, ...]          # 4 upper edges for XS/S/M/L (XL unbounded)
    per_bin_map: dict[str, Optional[float]]
    bin_counts: dict[str, int]


@dataclass(frozen=True)
class FPRecord:
    image_id: str
    detection: Detection
    category: str
    best_iou: float
    overlapped_gt: Optional[int]


def _det_sort_key(item):
    image_id, d = item
    return (-d.score, image_id, d.box.cx, d.box.cy, d.box.w, d.box.h)


@dataclass
class _MatchedDet:
    image_id: str
    detection: Detection
    matched_object: Optional[int]  # object_index, None when unmatched


def match_detections(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    cls: int,
    iou_thr: float = 0.5,
) -> list[_MatchedDet]:
    """Score-greedy single matching for one class across all images."""
    flat = [(img, d) for img in sorted(detections) for d in detections[img] if d.cls == cls]
    flat.sort(key=_det_sort_key)
    used: set[tuple[str, int]] = set()
    out: list[_MatchedDet] = []
    for image_id, d in flat:
        candidates = [g for g in gts.get(image_id, []) if g.cls == cls]
        best_iou = 0.0
        best_obj: Optional[int] = None
        for g in sorted(candidates, key=lambda g: g.object_index):
            v = iou(d.box, g.box)
            if v > best_iou and (image_id, g.object_index) not in used:
                best_iou = v
                best_obj = g.object_index
        if best_obj is not None and best_iou >= iou_thr:
            used.add((image_id, best_obj))
            out.append(_MatchedDet(image_id, d, best_obj))
        else:
            out.append(_MatchedDet(image_id, d, None))
    return out


def _ap_from_flags(tp_flags: Sequence[bool], n_gt: int, monotonize: bool) -> float:
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    precision = tp / (tp + fp)
    if monotonize:
        precision = np.maximum.accumulate(precision[::-1])[::-1]
    # each TP advances recall by exactly 1/n_gt, so AP is the mean of the
    # (possibly monotonized) precision at the TP ranks
    return float(precision[np.asarray(tp_flags, dtype=bool)].sum() / n_gt)


def average_precision(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    cls: int,
    iou_thr: float = 0.5,
    monotonize: bool = True,
) -> Optional[float]:
    """AP at the given IoU threshold; None when the class has no ground truth."""
    n_gt = sum(1 for objs in gts.values() for g in objs if g.cls == cls)
    if n_gt == 0:
        return None
    matched = match_detections(detections, gts, cls, iou_thr)
    flags = [m.matched_object is not None for m in matched]
    return _ap_from_flags(flags, n_gt, monotonize)


def mean_ap(per_class: dict[int, Optional[float]]) -> float:
    """Unweighted mean of the defined per-class APs."""
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        return 0.0
    return float(sum(defined) / len(defined))


def evaluate_map(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    classes: Iterable[int],
    iou_thr: float = 0.5,
    monotonize: bool = True,
) -> tuple[dict[int, Optional[float]], float]:
    per_class = {c: average_precision(detections, gts, c, iou_thr, monotonize) for c in classes}
    return per_class, mean_ap(per_class)


def pr_curve(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    cls: int,
    iou_thr: float = 0.5,
) -> PRCurve:
    """Precision/recall swept over every detection score as threshold."""
    n_gt = sum(1 for objs in gts.values() for g in objs if g.cls == cls)
    matched = match_detections(detections, gts, cls, iou_thr)
    thresholds, precision, recall = [], [], []
    tp = fp = 0
    for m in matched:
        if m.matched_object is not None:
            tp += 1
        else:
            fp += 1
        thresholds.append(m.detection.score)
        precision.append(tp / (tp + fp))
        recall.append(tp / n_gt if n_gt else 0.0)
    return PRCurve(cls, tuple(thresholds), tuple(precision), tuple(recall))


def size_bin_edges(areas: Sequence[float]) -> tuple[float, ...]:
    """Rank-based 10/30/70/90 percentile edges over ground-truth areas."""
    if not areas:
        raise ValueError("no ground-truth areas to bin")
    s = sorted(areas)
    n = len(s)
    if n < len(SIZE_BIN_NAMES):
        warnings.warn(f"only {n} ground-truth objects; size bins collapse", stacklevel=2)
    return tuple(s[max(0, math.ceil(q * n) - 1)] for q in SIZE_BIN_QUANTILES)


def _bin_of(area: float, edges: Sequence[float]) -> str:
    for name, edge in zip(SIZE_BIN_NAMES, edges):
        if area <= edge:
            return name
    return SIZE_BIN_NAMES[-1]


def size_breakdown(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    classes: Iterable[int],
    iou_thr: float = 0.5,
) -> SizeBinning:
    """mAP restricted to each object-size bin.

    Ground truth partitions into bins by box pixel area. A bin's detection
    pool keeps detections matched to that bin's objects plus unmatched
    detections whose own area falls inside the bin's range; detections
    matched to another bin's objects are excluded rather than penalized.
    """
    classes = list(classes)
    areas = [g.box.area for objs in gts.values() for g in objs]
    edges = size_bin_edges(areas)
    gt_bin = {
        (img, g.object_index): _bin_of(g.box.area, edges)
        for img, objs in gts.items() for g in objs
    }
    bin_counts = {name: 0 for name in SIZE_BIN_NAMES}
    for b in gt_bin.values():
        bin_counts[b] += 1

    per_bin_flags: dict[str, dict[int, list[tuple[float, tuple, bool]]]] = {
        name: {c: [] for c in classes} for name in SIZE_BIN_NAMES
    }
    per_bin_gt = {name: {c: 0 for c in classes} for name in SIZE_BIN_NAMES}
    for (img, obj_idx), b in gt_bin.items():
        cls = next(g.cls for g in gts[img] if g.object_index == obj_idx)
        per_bin_gt[b][cls] += 1

    for c in classes:
        for m in match_detections(detections, gts, c, iou_thr):
            key = (-m.detection.score, m.image_id, m.detection.box.cx, m.detection.box.cy)
            if m.matched_object is not None:
                b = gt_bin[(m.image_id, m.matched_object)]
                per_bin_flags[b][c].append((key[0], key, True))
            else:
                b = _bin_of(m.detection.box.area, edges)
                per_bin_flags[b][c].append((key[0], key, False))

    per_bin_map: dict[str, Optional[float]] = {}
    for name in SIZE_BIN_NAMES:
        aps: dict[int, Optional[float]] = {}
        for c in classes:
            n_gt = per_bin_gt[name][c]
            if n_gt == 0:
                aps[c] = None
                continue
            entries = sorted(per_bin_flags[name][c], key=lambda e: e[1])
            aps[c] = _ap_from_flags([e[2] for e in entries], n_gt, monotonize=True)
        defined = [v for v in aps.values() if v is not None]
        per_bin_map[name] = float(sum(defined) / len(defined)) if defined else None
    return SizeBinning(edges, per_bin_map, bin_counts)


def categorize_false_positives(
    detections: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    iou_thr: float = 0.5,
) -> list[FPRecord]:
    """Classify unmatched detections as Loc / Sim / BG / Oth.

    Loc: same-class overlap in [0.1, iou_thr); Sim: cross-class overlap
    >= 0.1 with no same-class overlap >= 0.1; BG: all overlaps < 0.1;
    Oth: anything else (e.g. duplicates of an already-matched object).
    """
    classes = sorted({d.cls for dets in detections.values() for d in dets})
    unmatched: list[tuple[str, Detection]] = []
    for c in classes:
        for m in match_detections(detections, gts, c, iou_thr):
            if m.matched_object is None:
                unmatched.append((m.image_id, m.detection))
    unmatched.sort(key=_det_sort_key)

    records: list[FPRecord] = []
    for image_id, d in unmatched:
        objs = gts.get(image_id, [])
        same = 0.0
        other = 0.0
        best = 0.0
        best_obj: Optional[int] = None
        for g in sorted(objs, key=lambda g: g.object_index):
            v = iou(d.box, g.box)
            if g.cls == d.cls:
                same = max(same, v)
            else:
                other = max(other, v)
            if v > best:
                best = v
                best_obj = g.object_index
        if LOC_IOU_LOW <= same < iou_thr:
            cat = "Loc"
        elif other >= LOC_IOU_LOW and same < LOC_IOU_LOW:
            cat = "Sim"
        elif best < LOC_IOU_LOW:
            cat = "BG"
        else:
            cat = "Oth"
        records.append(
            FPRecord(image_id, d, cat, best, best_obj if best >= LOC_IOU_LOW else None)
        )
    return records


def fp_category_counts(records: Iterable[FPRecord], score_thr: float = 0.0) -> dict[str, int]:
    counts = {name: 0 for name in FP_CATEGORIES}
    for r in records:
        if r.detection.score >= score_thr:
            counts[r.category] += 1
    return counts


# --- report files (CSV + standalone SVG) -------------------------------------


def _digest_comment(digest: Optional[str]) -> str:
    return f"# config_digest={digest}\n" if digest else ""


def write_pr_csv(path, curve: PRCurve, digest: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_digest_comment(digest))
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            fh.write(f"{t!r},{p!r},{r!r}\n")


def write_sizebins_csv(path, binning: SizeBinning, digest: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_digest_comment(digest))
        fh.write("bin,upper_edge,gt_count,map\n")
        edges = list(binning.edges) + [float("inf")]
        for name, edge in zip(SIZE_BIN_NAMES, edges):
            m = binning.per_bin_map[name]
            fh.write(f"{name},{edge!r},{binning.bin_counts[name]},{'' if m is None else repr(m)}\n")


def write_fp_csv(path, records: Sequence[FPRecord], digest: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_digest_comment(digest))
        fh.write("image_id,cls,score,cx,cy,w,h,category,best_iou,overlapped_gt\n")
        for r in records:
            d = r.detection
            gt = "" if r.overlapped_gt is None else r.overlapped_gt
            fh.write(
                f"{r.image_id},{d.cls},{d.score!r},{d.box.cx!r},{d.box.cy!r},"
                f"{d.box.w!r},{d.box.h!r},{r.category},{r.best_iou!r},{gt}\n"
            )


def svg_line_plot(path, series: dict[str, Sequence[tuple[float, float]]],
                  title: str = "", width: int = 480, height: int = 360,
                  digest: Optional[str] = None) -> None:
    """Minimal self-contained SVG: one polyline per named series on [0,1]^2 axes."""
    pad = 40
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")

    def sx(x):
        return pad + x * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if digest:
        parts.append(f"<!-- config_digest={digest} -->")
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>'
    )
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        if not pts:
            continue
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{color}" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
