"""Selective ensembling: pairwise agreement statistics, greedy diverse
selection, accuracy-and-diversity member weights, and fused inference.

Diversity between two detectors is the Yule Q statistic over per-object
detected/missed outcomes: +1 for identical behaviour, -1 for complementary
behaviour. Selection seeds with the most accurate hard-mining detector and
greedily adds the candidate most diverse against the current set, keeping
each addition only while fused validation mAP improves.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .boosting import DetectorRecord, compute_indicators
from .geometry import Detection, GroundTruthObject, nms
from .metrics import evaluate_map

logger = logging.getLogger("boostdet.ensemble")


@dataclass(frozen=True)
class PairCounts:
    """Joint detected/missed counts for two detectors over the same objects."""

    n11: int  # detected by both
    n00: int  # missed by both
    n01: int  # missed by first, detected by second
    n10: int  # detected by first, missed by second

    def __post_init__(self):
        if min(self.n11, self.n00, self.n01, self.n10) < 0:
            raise ValueError("pair counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n11 + self.n00 + self.n01 + self.n10


@dataclass
class EnsembleSet:
    members: list[DetectorRecord]
    q_matrix: np.ndarray       # [M*, M*] symmetric, unit diagonal
    div: np.ndarray            # [M*] average normalized diversity
    lam: np.ndarray            # [M*] final member weights, sum == M*
    uniform_fallback: bool = False


def pair_counts_from_hits(hits_a: Sequence[bool], hits_b: Sequence[bool]) -> PairCounts:
    a = np.asarray(hits_a, dtype=bool)
    b = np.asarray(hits_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("hit vectors must cover the same objects")
    return PairCounts(
        n11=int(np.count_nonzero(a & b)),
        n00=int(np.count_nonzero(~a & ~b)),
        n01=int(np.count_nonzero(~a & b)),
        n10=int(np.count_nonzero(a & ~b)),
    )


def pair_counts(
    det_a: dict[str, Sequence[Detection]],
    det_b: dict[str, Sequence[Detection]],
    gts: dict[str, Sequence[GroundTruthObject]],
    theta: float = 0.5,
) -> PairCounts:
    """Exhaustive joint counts over every annotated object."""
    ind_a = compute_indicators(gts, det_a, theta)
    ind_b = compute_indicators(gts, det_b, theta)
    keys = sorted(ind_a)
    hits_a = [ind_a[k] == 0 for k in keys]
    hits_b = [ind_b[k] == 0 for k in keys]
    return pair_counts_from_hits(hits_a, hits_b)


def q_statistic(c: PairCounts) -> float:
    """(n11 n00 - n01 n10) / (n11 n00 + n01 n10); 0 when the denominator vanishes."""
    agree = c.n11 * c.n00
    disagree = c.n01 * c.n10
    denom = agree + disagree
    if denom == 0:
        return 0.0
    return (agree - disagree) / denom


def normalize_q(q: float) -> float:
    """Affine map [-1, 1] -> [1, 0] reversed: higher value = more diverse."""
    return 0.5 * (1.0 - q)


def diversity_weights(q_matrix: np.ndarray) -> np.ndarray:
    """Average normalized diversity of each member against the rest.

    A singleton ensemble has no pairs; its diversity weight is 1 by
    convention so the final-weight formula stays defined.
    """
    m = q_matrix.shape[0]
    if m == 1:
        return np.ones(1)
    qstar = 0.5 * (1.0 - q_matrix)
    np.fill_diagonal(qstar, 0.0)
    return qstar.sum(axis=1) / (m - 1)


def final_weights(div: np.ndarray, alphas: np.ndarray) -> tuple[np.ndarray, bool]:
    """lambda_i = div_i * alpha_i * M* / sum(div * alpha); sums to M*.

    Returns (weights, uniform_fallback). When every div*alpha product is zero
    or the normalizer is non-positive (clone ensembles, negative detector
    weights), weights fall back to uniform 1 and the event is logged.
    """
    m = len(div)
    prod = div * alphas
    denom = float(prod.sum())
    if denom <= 0.0 or np.any(prod < 0):
        logger.warning("degenerate diversity/accuracy products; using uniform member weights")
        return np.ones(m), True
    return prod * (m / denom), False


def rescore(detections: Sequence[Detection], lam: float) -> list[Detection]:
    """Scale scores by a member weight, clipping back into [0, 1]."""
    return [
        Detection(d.cls, min(max(d.score * lam, 0.0), 1.0), d.box)
        for d in detections
    ]


def fuse_detections(
    per_member: Sequence[dict[str, Sequence[Detection]]],
    lam: Sequence[float],
    nms_thr: float,
) -> dict[str, list[Detection]]:
    """Re-score each member's detections, take the union, suppress per class."""
    if len(per_member) != len(lam):
        raise ValueError("one weight per member required")
    image_ids = sorted({img for dets in per_member for img in dets})
    fused: dict[str, list[Detection]] = {}
    for img in image_ids:
        pool: list[Detection] = []
        for dets, weight in zip(per_member, lam):
            pool.extend(rescore(dets.get(img, []), float(weight)))
        fused[img] = nms(pool, nms_thr)
    return fused


def _ensemble_weights(records: Sequence[DetectorRecord],
                      q_full: np.ndarray, member_idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray, bool]:
    idx = np.asarray(member_idx, dtype=int)
    q = q_full[np.ix_(idx, idx)]
    div = diversity_weights(q)
    alphas = np.array([records[i].alpha for i in idx])
    lam, fallback = final_weights(div, alphas)
    return div, lam, fallback


def greedy_select(
    candidates: Sequence[DetectorRecord],
    val_detections: Sequence[dict[str, Sequence[Detection]]],
    val_gts: dict[str, Sequence[GroundTruthObject]],
    classes: Sequence[int],
    max_size: Optional[int] = None,
    theta: float = 0.5,
    nms_thr: float = 0.45,
    iou_thr: float = 0.5,
    literal_argmax_q: bool = False,
) -> EnsembleSet:
    """Grow a diverse ensemble until fused validation mAP stops improving.

    The seed is the candidate with the highest validation mAP (ties: lower
    iteration). Each step adds the non-member with the largest summed
    normalized diversity against the current members (literal_argmax_q
    instead maximizes the summed raw Q, i.e. picks the LEAST diverse).
    """
    if not candidates:
        raise ValueError("no candidate detectors to select from")
    if len(val_detections) != len(candidates):
        raise ValueError("need validation detections for every candidate")
    n = len(candidates)
    max_size = n if max_size is None else min(max_size, n)

    hit_vectors = []
    keys = sorted({g.object_index for objs in val_gts.values() for g in objs})
    for dets in val_detections:
        ind = compute_indicators(val_gts, dets, theta)
        hit_vectors.append([ind[k] == 0 for k in keys])
    q_full = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            q = q_statistic(pair_counts_from_hits(hit_vectors[i], hit_vectors[j]))
            q_full[i, j] = q_full[j, i] = q

    def fused_map(member_idx: list[int]) -> tuple[float, np.ndarray, np.ndarray, bool]:
        div, lam, fallback = _ensemble_weights(candidates, q_full, member_idx)
        fused = fuse_detections([val_detections[i] for i in member_idx], lam, nms_thr)
        _, m = evaluate_map(fused, val_gts, classes, iou_thr)
        return m, div, lam, fallback

    seed = min(range(n), key=lambda i: (-candidates[i].val_map, candidates[i].iteration))
    members = [seed]
    best_map, div, lam, fallback = fused_map(members)
    while len(members) < max_size:
        remaining = [i for i in range(n) if i not in members]
        if not remaining:
            break

        def diversity_score(i: int) -> float:
            s = sum(q_full[i, j] for j in members)
            return s if literal_argmax_q else -s  # -sum(Q) == more diverse first

        pick = min(remaining, key=lambda i: (-diversity_score(i), candidates[i].iteration))
        trial = members + [pick]
        trial_map, t_div, t_lam, t_fallback = fused_map(trial)
        if trial_map <= best_map:
            break
        members, best_map, div, lam, fallback = trial, trial_map, t_div, t_lam, t_fallback

    idx = np.asarray(members, dtype=int)
    return EnsembleSet(
        members=[candidates[i] for i in members],
        q_matrix=q_full[np.ix_(idx, idx)],
        div=div,
        lam=lam,
        uniform_fallback=fallback,
    )


# --- manifest ---------------------------------------------------------------


def save_ensemble_manifest(path, ens: EnsembleSet, snapshot_paths: Sequence[str],
                           extra: Optional[dict] = None) -> None:
    doc = {
        "members": [
            {
                "snapshot": snap,
                "iteration": r.iteration,
                "stage": r.stage,
                "alpha": r.alpha,
                "error_rate": r.error_rate,
                "val_map": r.val_map,
            }
            for r, snap in zip(ens.members, snapshot_paths)
        ],
        "q_matrix": [[float(v) for v in row] for row in ens.q_matrix],
        "div": [float(v) for v in ens.div],
        "lambda": [float(v) for v in ens.lam],
        "uniform_fallback": ens.uniform_fallback,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_ensemble_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
