"""Single-detector training: target building, weighted SGD steps, inference.

The trainer consumes per-object sample weights (positives inherit the weight
of their matched object, negatives stay at 1), runs one Adam step per image,
and is fully determined by its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import net
from .geometry import Detection, GroundTruthObject, match_default_boxes
from .loss import LossConfig, SampleBatch, detection_loss_grad, mine_hard_negatives


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    learning_rate: float = 1e-3
    finetune_learning_rate: float = 1e-4  # used when warm-starting
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    match_iou: float = 0.4
    hard_mining: bool = True
    neg_pos_ratio: float = 3.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.match_iou < 1.0:
            raise ValueError("match_iou must lie in (0, 1)")


@dataclass
class ImageTargets:
    """Static matching targets for one image (independent of the weights)."""

    pos_anchor_idx: np.ndarray   # [n_pos] ascending anchor indices
    pos_object_ids: list[int]    # matched object_index per positive anchor
    onehot: np.ndarray           # [num_anchors, C+1]
    gt_loc: np.ndarray           # [n_pos, 4] encoded offsets
    positive_mask: np.ndarray    # [num_anchors] bool


def build_targets(net_cfg: net.NetConfig, gts: Sequence[GroundTruthObject],
                  match_iou: float) -> ImageTargets:
    anchors = net.default_box_list(net_cfg)
    anchor_arr = net.default_box_array(net_cfg)
    n = len(anchors)
    onehot = np.zeros((n, net_cfg.num_classes + 1))
    onehot[:, 0] = 1.0
    positive_mask = np.zeros(n, dtype=bool)
    if not gts:
        return ImageTargets(np.empty(0, dtype=int), [], onehot, np.zeros((0, 4)), positive_mask)
    by_index = {g.object_index: g for g in gts}
    matches = match_default_boxes(anchors, gts, match_iou)
    pos_idx = []
    pos_obj = []
    for m in matches:
        if m.is_positive:
            pos_idx.append(m.sample_index)
            pos_obj.append(m.matched_object)
            g = by_index[m.matched_object]
            onehot[m.sample_index, :] = 0.0
            onehot[m.sample_index, g.cls] = 1.0
            positive_mask[m.sample_index] = True
    pos_idx_arr = np.asarray(pos_idx, dtype=int)
    if pos_idx:
        gt_boxes = np.array(
            [(by_index[o].box.cx, by_index[o].box.cy, by_index[o].box.w, by_index[o].box.h)
             for o in pos_obj]
        )
        gt_loc = net.encode_offsets(gt_boxes, anchor_arr[pos_idx_arr])
    else:
        gt_loc = np.zeros((0, 4))
    return ImageTargets(pos_idx_arr, pos_obj, onehot, gt_loc, positive_mask)


def train_detector(
    images: dict[str, np.ndarray],
    annotations: dict[str, Sequence[GroundTruthObject]],
    sample_weights: dict[int, float],
    net_cfg: net.NetConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    seed: int,
    warm_start: Optional[net.NetworkParams] = None,
    targets: Optional[dict[str, ImageTargets]] = None,
) -> net.NetworkParams:
    """Train one detector; sample_weights maps object_index -> positive-sample weight."""
    if targets is None:
        targets = {
            image_id: build_targets(net_cfg, annotations.get(image_id, []), train_cfg.match_iou)
            for image_id in images
        }
    params = warm_start.copy() if warm_start is not None else net.init_params(net_cfg, seed)
    lr = train_cfg.finetune_learning_rate if warm_start is not None else train_cfg.learning_rate
    state = net.adam_init(params)
    rng = np.random.default_rng([seed, 1])
    ids = sorted(images)
    g, a, cc = net_cfg.grid, net_cfg.anchors_per_cell, net_cfg.num_classes + 1

    for _ in range(train_cfg.epochs):
        for image_id in (ids[k] for k in rng.permutation(len(ids))):
            tgt = targets[image_id]
            head, cache = net.forward(params, images[image_id], want_cache=True)
            logits = head.flat_logits()
            n = logits.shape[0]
            weights = np.ones(n)
            for anchor_i, obj in zip(tgt.pos_anchor_idx, tgt.pos_object_ids):
                weights[anchor_i] = sample_weights.get(obj, 1.0)
            if train_cfg.hard_mining:
                keep = mine_hard_negatives(logits, tgt.positive_mask, train_cfg.neg_pos_ratio)
            else:
                keep = np.ones(n, dtype=bool)
            batch = SampleBatch(
                logits=logits[keep],
                loc_preds=head.flat_offsets()[tgt.pos_anchor_idx],
                gt_cls=tgt.onehot[keep],
                gt_loc=tgt.gt_loc,
                weights=weights[keep],
                positive_mask=tgt.positive_mask[keep],
            )
            grad_logits, grad_loc = detection_loss_grad(batch, loss_cfg)
            full_gl = np.zeros((n, cc))
            full_gl[keep] = grad_logits
            full_go = np.zeros((n, 4))
            if tgt.pos_anchor_idx.size:
                full_go[tgt.pos_anchor_idx] = grad_loc
            grads = net.backward(
                params, cache, full_gl.reshape(g, g, a, cc), full_go.reshape(g, g, a, 4)
            )
            net.adam_step(
                params, grads, state,
                lr=lr, beta1=train_cfg.beta1,
                beta2=train_cfg.beta2, eps=train_cfg.eps,
            )
    return params


def run_detector(
    params: net.NetworkParams,
    images: dict[str, np.ndarray],
    score_thr: float,
    nms_thr: float,
) -> dict[str, list[Detection]]:
    """Decode detections for every image; deterministic given params."""
    out: dict[str, list[Detection]] = {}
    for image_id in sorted(images):
        head = net.forward(params, images[image_id])
        out[image_id] = net.decode_detections(head, score_thr, nms_thr)
    return out
