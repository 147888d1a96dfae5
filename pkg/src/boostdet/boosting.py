"""Curriculum boosting over object weights.

The orchestrator trains a sequence of detectors under a per-object weight
vector (always a probability distribution):

  denoise stage:  objects the current detector misses are treated as likely
                  label noise and relatively down-weighted; the best detector
                  of this stage (on held-out validation) becomes the clean
                  reference detector.
  hardmine stage: weights reset to uniform, every detector warm-starts from
                  the clean reference, and missed objects are up-weighted so
                  later detectors concentrate on hard instances.

Every iteration writes its snapshot, weight vector, training-set detections
and metrics into a run directory, which also makes interrupted runs
resumable by replaying the recorded bookkeeping.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import Detection, GroundTruthObject, load_detections, object_detected, save_detections
from .net import NetworkParams, load_params, save_params

logger = logging.getLogger("boostdet.boosting")

ERROR_RATE_CLAMP = 1e-6
STAGE_DENOISE = "denoise"
STAGE_HARDMINE = "hardmine"


class BoostConfigError(ValueError):
    """Invalid boosting configuration (e.g. single-class detector weights)."""


@dataclass(frozen=True)
class BoostConfig:
    denoise_rounds: int = 5
    hardmine_rounds: int = 7
    num_classes: int = 3
    iou_theta: float = 0.5
    det_score_thr: float = 0.05
    det_nms_thr: float = 0.45
    clean_selection: str = "best_val"  # or "last_denoise"
    seed: int = 0

    def __post_init__(self):
        if self.denoise_rounds < 0 or self.hardmine_rounds < 0 or self.total_rounds < 1:
            raise BoostConfigError("round counts must be non-negative with at least one round")
        if not 0.0 < self.iou_theta < 1.0:
            raise BoostConfigError("iou_theta must lie in (0, 1)")
        if self.clean_selection not in ("best_val", "last_denoise"):
            raise BoostConfigError(f"unknown clean_selection {self.clean_selection!r}")

    @property
    def total_rounds(self) -> int:
        return self.denoise_rounds + self.hardmine_rounds


@dataclass
class ObjectWeightVector:
    """Probability vector over annotated objects, keyed by object_index."""

    object_ids: tuple[int, ...]
    weights: np.ndarray
    iteration: int = 1

    def __post_init__(self):
        if len(self.object_ids) != len(self.weights):
            raise ValueError("ids and weights must align")
        if np.any(self.weights <= 0):
            raise ValueError("object weights must stay strictly positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("object weights must sum to 1")

    def __len__(self) -> int:
        return len(self.object_ids)

    def weight_of(self, object_index: int) -> float:
        return float(self.weights[self.object_ids.index(object_index)])


@dataclass
class DetectorRecord:
    params: NetworkParams
    error_rate: float
    alpha: float
    stage: str
    iteration: int
    val_map: float


def init_object_weights(objects) -> ObjectWeightVector:
    """Uniform 1/N weights; accepts a count or a sequence of object ids."""
    if isinstance(objects, int):
        ids: tuple[int, ...] = tuple(range(1, objects + 1))
    else:
        ids = tuple(sorted(objects))
    n = len(ids)
    if n < 1:
        raise ValueError("need at least one object")
    return ObjectWeightVector(ids, np.full(n, 1.0 / n), iteration=1)


def positive_sample_weight(w: ObjectWeightVector, object_index: int) -> float:
    """Training-sample weight of an object: N times its boosting weight."""
    return len(w) * w.weight_of(object_index)


def sample_weight_map(w: ObjectWeightVector) -> dict[int, float]:
    n = len(w)
    return {obj: n * float(wt) for obj, wt in zip(w.object_ids, w.weights)}


def compute_indicators(
    gts: dict[str, Sequence[GroundTruthObject]],
    detections: dict[str, Sequence[Detection]],
    theta: float = 0.5,
) -> dict[int, int]:
    """Miss indicator per object: 0 when detected (same class, IoU >= theta), else 1."""
    out: dict[int, int] = {}
    for image_id in sorted(gts):
        dets = detections.get(image_id, [])
        for g in gts[image_id]:
            out[g.object_index] = 0 if object_detected(g, dets, theta) else 1
    return out


def _indicator_array(w: ObjectWeightVector, indicators: dict[int, int]) -> np.ndarray:
    try:
        return np.array([indicators[obj] for obj in w.object_ids], dtype=np.float64)
    except KeyError as exc:
        raise ValueError(f"indicator missing for object {exc}") from None


def error_rate(w: ObjectWeightVector, indicators: dict[int, int]) -> float:
    """Weighted fraction of missed objects (denominator is 1 up to rounding)."""
    ind = _indicator_array(w, indicators)
    return float(np.sum(w.weights * ind) / np.sum(w.weights))


def detector_alpha(e: float, num_classes: int) -> float:
    """log((1 - E)/E) + log(C - 1) with E clamped away from {0, 1}."""
    if num_classes < 2:
        raise BoostConfigError("detector weights need at least 2 object classes")
    e = min(max(e, ERROR_RATE_CLAMP), 1.0 - ERROR_RATE_CLAMP)
    return math.log((1.0 - e) / e) + math.log(num_classes - 1)


def _reweight(w: ObjectWeightVector, factors: np.ndarray) -> ObjectWeightVector:
    raw = w.weights * factors
    z = raw.sum()
    return ObjectWeightVector(w.object_ids, raw / z, iteration=w.iteration + 1)


def downweight_undetected(w: ObjectWeightVector, indicators: dict[int, int],
                          alpha: float) -> ObjectWeightVector:
    """Denoise update: detected objects gain e^alpha, missed ones stay, then renormalize."""
    ind = _indicator_array(w, indicators)
    return _reweight(w, np.exp(alpha * (1.0 - ind)))


def upweight_undetected(w: ObjectWeightVector, indicators: dict[int, int],
                        alpha: float) -> ObjectWeightVector:
    """Hard-mining update: missed objects gain e^alpha, mirror of downweight_undetected."""
    ind = _indicator_array(w, indicators)
    return _reweight(w, np.exp(alpha * ind))


# --- orchestration ----------------------------------------------------------

TrainerFn = Callable[[ObjectWeightVector, Optional[NetworkParams], int, str], NetworkParams]
DetectFn = Callable[[NetworkParams], dict[str, list[Detection]]]
ValMapFn = Callable[[NetworkParams], float]


def _iter_dir(run_dir: Path, iteration: int) -> Path:
    return run_dir / f"iter_{iteration:02d}"


def _write_iteration(run_dir: Path, record: DetectorRecord, w: ObjectWeightVector,
                     detections: dict[str, list[Detection]]) -> None:
    d = _iter_dir(run_dir, record.iteration)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "params.bdet", record.params)
    with open(d / "weights.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "iteration": w.iteration,
                "object_ids": list(w.object_ids),
                "weights": [float(x) for x in w.weights],
            },
            fh,
        )
    save_detections(d / "detections.json", detections)
    with open(d / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "iteration": record.iteration,
                "stage": record.stage,
                "error_rate": record.error_rate,
                "alpha": record.alpha,
                "val_map": record.val_map,
            },
            fh,
            sort_keys=True,
        )


def _load_iteration(run_dir: Path, iteration: int) -> Optional[tuple[DetectorRecord, dict]]:
    d = _iter_dir(run_dir, iteration)
    metrics_path = d / "metrics.json"
    if not metrics_path.exists():
        return None
    with open(metrics_path, encoding="utf-8") as fh:
        m = json.load(fh)
    record = DetectorRecord(
        params=load_params(d / "params.bdet"),
        error_rate=float(m["error_rate"]),
        alpha=float(m["alpha"]),
        stage=str(m["stage"]),
        iteration=int(m["iteration"]),
        val_map=float(m["val_map"]),
    )
    return record, load_detections(d / "detections.json")


def select_clean(records: Sequence[DetectorRecord], mode: str = "best_val") -> DetectorRecord:
    """The denoise-stage detector used to warm-start hard mining.

    best_val picks the highest validation mAP (ties: earlier iteration);
    last_denoise literally takes the final denoise iteration.
    """
    denoise = [r for r in records if r.stage == STAGE_DENOISE]
    if not denoise:
        raise ValueError("no denoise-stage records to select from")
    if mode == "last_denoise":
        return max(denoise, key=lambda r: r.iteration)
    best = denoise[0]
    for r in denoise[1:]:
        if r.val_map > best.val_map:
            best = r
    return best


def run_boosting(
    train_gts: dict[str, Sequence[GroundTruthObject]],
    cfg: BoostConfig,
    trainer: TrainerFn,
    detect_fn: DetectFn,
    val_map_fn: ValMapFn,
    run_dir: Optional[Path] = None,
    resume: bool = False,
) -> list[DetectorRecord]:
    """Full two-stage boosting loop; returns one record per iteration.

    trainer(weights, warm_start, iteration, stage) fits one detector;
    detect_fn runs it on the training images at the configured operating
    point; val_map_fn scores it on held-out validation data. If a trainer
    call fails, everything completed so far stays on disk and the error
    propagates.
    """
    object_ids = sorted(g.object_index for objs in train_gts.values() for g in objs)
    if len(set(object_ids)) != len(object_ids):
        raise ValueError("object_index values must be unique across the dataset")
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    w = init_object_weights(object_ids)
    records: list[DetectorRecord] = []
    clean: Optional[DetectorRecord] = None

    for iteration in range(1, cfg.total_rounds + 1):
        stage = STAGE_DENOISE if iteration <= cfg.denoise_rounds else STAGE_HARDMINE
        if iteration == cfg.denoise_rounds + 1 and cfg.denoise_rounds > 0:
            # with no denoise rounds this degenerates to plain boosting:
            # no clean reference, every detector trains from scratch
            clean = select_clean(records, cfg.clean_selection)
            logger.info("clean detector selected from iteration %d", clean.iteration)
            w = init_object_weights(object_ids)
            w.iteration = iteration

        loaded = _load_iteration(run_dir, iteration) if (run_dir and resume) else None
        if loaded is not None:
            record, detections = loaded
            if record.stage != stage:
                raise ValueError(
                    f"resume mismatch at iteration {iteration}: stored stage {record.stage}"
                )
        else:
            warm = clean.params if (stage == STAGE_HARDMINE and clean is not None) else None
            params = trainer(w, warm, iteration, stage)
            detections = detect_fn(params)
            indicators = compute_indicators(train_gts, detections, cfg.iou_theta)
            e = error_rate(w, indicators)
            alpha = detector_alpha(e, cfg.num_classes)
            record = DetectorRecord(
                params=params,
                error_rate=e,
                alpha=alpha,
                stage=stage,
                iteration=iteration,
                val_map=val_map_fn(params),
            )
            if run_dir is not None:
                _write_iteration(run_dir, record, w, detections)
        if record.alpha < 0:
            logger.warning(
                "iteration %d: error rate %.4f exceeds (C-1)/C; negative detector "
                "weight inverts the update direction", iteration, record.error_rate,
            )
        records.append(record)

        indicators = compute_indicators(train_gts, detections, cfg.iou_theta)
        if stage == STAGE_DENOISE:
            w = downweight_undetected(w, indicators, record.alpha)
        else:
            w = upweight_undetected(w, indicators, record.alpha)
    return records
