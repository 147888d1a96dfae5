"""Sample-weighted detection loss and its analytic gradient.

The objective is a per-sample-weighted softmax cross-entropy over anchor
classifications plus a weighted smooth-L1 penalty over the box offsets of
positive anchors:

    total = (alpha_cls / n_total) * cls_term + (alpha_reg / n_pos) * reg_term

Per-sample weights scale both the loss terms and their gradients, so a
zero-weight sample contributes nothing and doubling a weight doubles that
sample's gradient rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12  # floor on softmax probabilities inside log()


@dataclass(frozen=True)
class LossConfig:
    alpha_cls: float = 1.0
    alpha_reg: float = 1.0
    num_classes: int = 3

    def __post_init__(self):
        if self.alpha_cls < 0 or self.alpha_reg < 0 or self.alpha_cls + self.alpha_reg <= 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.num_classes < 1:
            raise ValueError("need at least one object class")


@dataclass
class SampleBatch:
    """One image's training samples after matching (and optional mining).

    logits:        [n_total, C+1] raw class scores, background at column 0
    loc_preds:     [n_pos, 4] predicted box offsets for positive samples
    gt_cls:        [n_total, C+1] one-hot class targets
    gt_loc:        [n_pos, 4] offset targets for positive samples
    weights:       [n_total] per-sample weights, >= 0
    positive_mask: [n_total] True where the sample matched an object; the
                   k-th True row corresponds to row k of loc_preds/gt_loc
    """

    logits: np.ndarray
    loc_preds: np.ndarray
    gt_cls: np.ndarray
    gt_loc: np.ndarray
    weights: np.ndarray
    positive_mask: np.ndarray

    def __post_init__(self):
        n_total = self.logits.shape[0]
        n_pos = int(np.count_nonzero(self.positive_mask))
        if self.gt_cls.shape != self.logits.shape:
            raise ValueError("gt_cls must match logits shape")
        if self.loc_preds.shape != (n_pos, 4) or self.gt_loc.shape != (n_pos, 4):
            raise ValueError("loc arrays must have one row per positive sample")
        if self.weights.shape != (n_total,) or self.positive_mask.shape != (n_total,):
            raise ValueError("weights/positive_mask must be per-sample vectors")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")
        if not np.allclose(self.gt_cls.sum(axis=1), 1.0):
            raise ValueError("each gt_cls row must be one-hot")

    @property
    def n_total(self) -> int:
        return self.logits.shape[0]

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.positive_mask))


@dataclass(frozen=True)
class LossValue:
    total: float
    cls_term: float
    reg_term: float
    no_positives: bool = field(default=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; works on 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; elementwise on arrays."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def detection_loss(batch: SampleBatch, cfg: LossConfig) -> LossValue:
    """Weighted cross-entropy plus weighted smooth-L1 over one sample batch."""
    probs = softmax(batch.logits)
    logp = np.log(np.maximum(probs, LOG_CLAMP))
    cls_term = float(-np.sum(batch.weights[:, None] * batch.gt_cls * logp))

    n_pos = batch.n_pos
    if n_pos == 0:
        return LossValue(
            total=cfg.alpha_cls / batch.n_total * cls_term,
            cls_term=cls_term,
            reg_term=0.0,
            no_positives=True,
        )
    w_pos = batch.weights[batch.positive_mask]
    reg_term = float(np.sum(w_pos[:, None] * smooth_l1(batch.loc_preds - batch.gt_loc)))
    total = cfg.alpha_cls / batch.n_total * cls_term + cfg.alpha_reg / n_pos * reg_term
    return LossValue(total=total, cls_term=cls_term, reg_term=reg_term)


def detection_loss_grad(batch: SampleBatch, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of detection_loss w.r.t. (logits, loc_preds).

    Classification rows: (alpha_cls / n_total) * w_i * (softmax_i - onehot_i).
    Regression rows: (alpha_reg / n_pos) * w_i * clamp(pred - target, -1, 1),
    the smooth-L1 derivative (the clamp takes value +-1 at |x| = 1).
    """
    probs = softmax(batch.logits)
    grad_logits = (cfg.alpha_cls / batch.n_total) * batch.weights[:, None] * (probs - batch.gt_cls)

    n_pos = batch.n_pos
    if n_pos == 0:
        return grad_logits, np.zeros((0, 4))
    w_pos = batch.weights[batch.positive_mask]
    diff = np.clip(batch.loc_preds - batch.gt_loc, -1.0, 1.0)
    grad_loc = (cfg.alpha_reg / n_pos) * w_pos[:, None] * diff
    return grad_logits, grad_loc


def mine_hard_negatives(
    logits: np.ndarray,
    positive_mask: np.ndarray,
    neg_pos_ratio: float = 3.0,
) -> np.ndarray:
    """Keep-mask retaining all positives and the hardest negatives.

    Negatives rank by background cross-entropy -log p(background); the top
    ceil(neg_pos_ratio * max(n_pos, 1)) are kept so images without positives
    still contribute background samples. Ties break on lower sample index.
    """
    positive_mask = np.asarray(positive_mask, bool)
    n_pos = int(np.count_nonzero(positive_mask))
    n_keep = int(np.ceil(neg_pos_ratio * max(n_pos, 1)))
    probs = softmax(np.asarray(logits, dtype=np.float64))
    bg_loss = -np.log(np.maximum(probs[:, 0], LOG_CLAMP))
    neg_idx = np.flatnonzero(~positive_mask)
    # stable sort on -loss keeps the lower index first among ties
    order = neg_idx[np.argsort(-bg_loss[neg_idx], kind="stable")]
    keep = positive_mask.copy()
    keep[order[:n_keep]] = True
    return keep
