"""Miniature anchor-based detector with hand-written forward and backward passes.

Topology (image_size divisible by 8, single grayscale channel):

    conv3x3(stem) + ReLU -> maxpool2 -> conv3x3(mid) + ReLU -> maxpool2
        -> 4 dilated conv3x3 layers (configurable rates, same padding, ReLU)
        -> transposed conv (4x4, stride 2) + skip add from the first pool + ReLU
        -> stride-4 conv3x3 + ReLU  (grid of image_size // 8)
        -> two 3x3 heads: class logits per anchor, box offsets per anchor

Everything is float64 and deterministic. Convolutions run over [H, W, C]
arrays via im2col; dilation gathers taps at strided offsets, which is
numerically identical to convolving with a zero-inflated kernel.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Box, Detection, nms

SNAPSHOT_MAGIC = b"BDET"
SNAPSHOT_VERSION = 1

# decoded log-size offsets are clamped here before exp() so a wild head
# output can never produce an infinite box
MAX_LOG_SIZE_OFFSET = 5.0


class GraphConfigError(ValueError):
    """Raised when a layer plan has inconsistent shapes at build time."""


@dataclass(frozen=True)
class Kernel:
    """Convolution kernel: values [K, K, C_in, C_out] plus a dilation rate."""

    values: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.values.ndim != 4:
            raise GraphConfigError("kernel values must be [K, K, C_in, C_out]")
        k = self.values.shape[0]
        if self.values.shape[1] != k or k % 2 == 0:
            raise GraphConfigError(f"kernel must be square with odd side, got {self.values.shape}")
        if self.dilation < 1:
            raise GraphConfigError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def effective_size(self) -> int:
        return self.size + (self.size - 1) * (self.dilation - 1)


def dilate_kernel(k: Kernel) -> Kernel:
    """Materialize the zero-inflated kernel: original taps at stride-d positions."""
    if k.dilation == 1:
        return k
    ks, d = k.size, k.dilation
    keff = k.effective_size
    out = np.zeros((keff, keff) + k.values.shape[2:], dtype=k.values.dtype)
    out[::d, ::d] = k.values
    return Kernel(out, dilation=1)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    keff = kernel + (kernel - 1) * (dilation - 1)
    out = (size + 2 * padding - keff) // stride + 1
    if out < 1:
        raise GraphConfigError(
            f"conv output collapses: size={size} kernel={kernel} stride={stride} "
            f"padding={padding} dilation={dilation}"
        )
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, dilation: int):
    """Unfold x [H, W, C] into rows of (kh, kw, c)-ordered patches."""
    keff = k + (k - 1) * (dilation - 1)
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[:2]
    ho = (hp - keff) // stride + 1
    wo = (wp - keff) // stride + 1
    win = sliding_window_view(xp, (keff, keff), axis=(0, 1))
    win = win[::stride, ::stride, :, ::dilation, ::dilation]  # [ho, wo, c, k, k]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, k * k * x.shape[2])
    return cols, ho, wo, (hp, wp)


def _col_scatter(gcols: np.ndarray, k: int, stride: int, padding: int, dilation: int,
                 ho: int, wo: int, padded_shape, out_hw) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back onto the input plane."""
    hp, wp = padded_shape
    c = gcols.shape[1] // (k * k)
    g5 = gcols.reshape(ho, wo, k, k, c)
    gxp = np.zeros((hp, wp, c))
    for a in range(k):
        ra = slice(a * dilation, a * dilation + (ho - 1) * stride + 1, stride)
        for b in range(k):
            rb = slice(b * dilation, b * dilation + (wo - 1) * stride + 1, stride)
            gxp[ra, rb, :] += g5[:, :, a, b, :]
    h, w = out_hw
    return gxp[padding:padding + h, padding:padding + w, :]


def _conv_raw_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
                      dilation: int, bias: Optional[np.ndarray]):
    """Cross-correlation core shared by conv2d and the transpose pair."""
    if x.ndim != 3 or x.shape[2] != w.shape[2]:
        raise GraphConfigError(f"input channels {x.shape} do not feed kernel {w.shape}")
    ks = w.shape[0]
    cols, ho, wo, padded = _im2col(x, ks, stride, padding, dilation)
    wflat = w.reshape(ks * ks * w.shape[2], w.shape[3])
    y = cols @ wflat
    if bias is not None:
        y = y + bias
    cache = (cols, x.shape, ho, wo, padded, stride, padding, dilation, w)
    return y.reshape(ho, wo, w.shape[3]), cache


def _conv_raw_backward(gy: np.ndarray, cache, need_gx: bool = True):
    cols, x_shape, ho, wo, padded, stride, padding, dilation, w = cache
    ks = w.shape[0]
    cout = w.shape[3]
    gflat = gy.reshape(ho * wo, cout)
    gw = (cols.T @ gflat).reshape(w.shape)
    gb = gflat.sum(axis=0)
    if not need_gx:
        return None, gw, gb
    wflat = w.reshape(ks * ks * w.shape[2], cout)
    gcols = gflat @ wflat.T
    gx = _col_scatter(gcols, ks, stride, padding, dilation, ho, wo, padded, x_shape[:2])
    return gx, gw, gb


def conv2d_forward(x: np.ndarray, k: Kernel, stride: int = 1, padding: int = 0,
                   bias: Optional[np.ndarray] = None):
    """Cross-correlate x [H, W, C_in] with k; returns (y [Ho, Wo, C_out], cache)."""
    return _conv_raw_forward(x, k.values, stride, padding, k.dilation, bias)


def conv2d_backward(gy: np.ndarray, cache):
    """Gradients of conv2d_forward: returns (gx, gw [K,K,Cin,Cout], gb [Cout])."""
    return _conv_raw_backward(gy, cache)


def dilated_conv_forward(x: np.ndarray, k: Kernel, bias: Optional[np.ndarray] = None):
    """Same-padding dilated convolution followed by ReLU.

    Numerically equal to conv2d_forward(x, dilate_kernel(k)) with the same
    padding; the taps are gathered directly instead of multiplying zeros.
    """
    pad = (k.effective_size - 1) // 2
    pre, conv_cache = conv2d_forward(x, k, stride=1, padding=pad, bias=bias)
    y = np.maximum(pre, 0.0)
    return y, (conv_cache, pre)


def dilated_conv_backward(gy: np.ndarray, cache):
    conv_cache, pre = cache
    return conv2d_backward(gy * (pre > 0.0), conv_cache)


def maxpool2_forward(x: np.ndarray):
    """2x2 stride-2 max pooling; ties resolve to the first (row-major) element."""
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise GraphConfigError(f"maxpool2 needs even spatial size, got {x.shape}")
    v = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4, c)
    idx = v.argmax(axis=2)
    y = np.take_along_axis(v, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, (idx, (h, w, c))


def maxpool2_backward(gy: np.ndarray, cache):
    idx, (h, w, c) = cache
    gv = np.zeros((h // 2, w // 2, 4, c))
    np.put_along_axis(gv, idx[:, :, None, :], gy[:, :, None, :], axis=2)
    return gv.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def conv_transpose2d_forward(y: np.ndarray, w: np.ndarray, stride: int = 2,
                             padding: int = 1, bias: Optional[np.ndarray] = None):
    """Transposed convolution, the exact adjoint of conv2d_forward(. , w, stride, padding).

    w is [K, K, C_out, C_in] in the down-convolution orientation: the op maps
    [h, w, C_in] up to [h*stride, w*stride, C_out] for the default 4/2/1 case.
    """
    k = w.shape[0]
    cin = w.shape[3]
    cout = w.shape[2]
    if y.shape[2] != cin:
        raise GraphConfigError(f"transpose-conv input channels {y.shape} vs kernel {w.shape}")
    ho, wo = y.shape[:2]
    out_h = (ho - 1) * stride + k - 2 * padding
    out_w = (wo - 1) * stride + k - 2 * padding
    hp, wp = out_h + 2 * padding, out_w + 2 * padding
    wflat = w.reshape(k * k * cout, cin)
    gcols = y.reshape(ho * wo, cin) @ wflat.T
    z = _col_scatter(gcols, k, stride, padding, 1, ho, wo, (hp, wp), (out_h, out_w))
    if bias is not None:
        z = z + bias
    return z, (y, w, stride, padding)


def conv_transpose2d_backward(gz: np.ndarray, cache):
    """Returns (gy, gw, gb) for conv_transpose2d_forward."""
    y, w, stride, padding = cache
    gy, down_cache = _conv_raw_forward(gz, w, stride, padding, 1, None)
    # z is bilinear in (w, y): the weight gradient is the conv weight-gradient
    # form with the input and output-gradient roles swapped
    cols, _, ho, wo = down_cache[0], down_cache[1], down_cache[2], down_cache[3]
    gw = (cols.T @ y.reshape(ho * wo, y.shape[2])).reshape(w.shape)
    gb = gz.sum(axis=(0, 1))
    return gy, gw, gb


# --- network definition -----------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    in_channels: int = 1
    stem_channels: int = 16
    mid_channels: int = 32
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    head_channels: int = 32
    num_classes: int = 3
    scales: tuple[float, ...] = (0.15, 0.3)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def __post_init__(self):
        if self.image_size % 8 != 0 or self.image_size < 8:
            raise GraphConfigError("image_size must be a positive multiple of 8")
        if len(self.dilation_rates) != 4 or any(r < 1 for r in self.dilation_rates):
            raise GraphConfigError("the dilated block takes exactly 4 positive rates")
        if self.num_classes < 1:
            raise GraphConfigError("need at least one object class")

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @property
    def num_anchors(self) -> int:
        return self.grid * self.grid * self.anchors_per_cell


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | dilated_conv | deconv | pool | head
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    dilation: int = 1
    in_channels: int = 0
    out_channels: int = 0


def build_dilated_block(channels: int, rates: Sequence[int]) -> list[LayerSpec]:
    """Layer specs for the four-layer dilated chain; each layer keeps spatial size."""
    if any(r < 1 for r in rates):
        raise GraphConfigError("dilation rates must be positive")
    specs = []
    for i, r in enumerate(rates, start=1):
        keff = 3 + 2 * (r - 1)
        specs.append(
            LayerSpec(
                name=f"dil{i}",
                kind="dilated_conv",
                kernel=3,
                padding=(keff - 1) // 2,
                dilation=r,
                in_channels=channels,
                out_channels=channels,
            )
        )
    return specs


def layer_plan(cfg: NetConfig) -> list[LayerSpec]:
    """All parameterized layers in forward order, shape-checked at build time."""
    a = cfg.anchors_per_cell
    plan = [
        LayerSpec("stem", "conv", 3, 1, 1, 1, cfg.in_channels, cfg.stem_channels),
        LayerSpec("conv2", "conv", 3, 1, 1, 1, cfg.stem_channels, cfg.mid_channels),
        *build_dilated_block(cfg.mid_channels, cfg.dilation_rates),
        LayerSpec("deconv", "deconv", 4, 2, 1, 1, cfg.mid_channels, cfg.stem_channels),
        LayerSpec("reduce", "conv", 3, 4, 1, 1, cfg.stem_channels, cfg.head_channels),
        LayerSpec("cls_head", "head", 3, 1, 1, 1, cfg.head_channels, a * (cfg.num_classes + 1)),
        LayerSpec("loc_head", "head", 3, 1, 1, 1, cfg.head_channels, a * 4),
    ]
    # walk the spatial sizes once so inconsistent configs fail at build time
    size = cfg.image_size
    size = conv_output_size(size, 3, 1, 1)          # stem
    size //= 2                                      # pool1 (skip source)
    skip = size
    size = conv_output_size(size, 3, 1, 1)          # conv2
    size //= 2                                      # pool2
    for spec in plan[2:6]:
        size = conv_output_size(size, spec.kernel, spec.stride, spec.padding, spec.dilation)
    size = (size - 1) * 2 + 4 - 2                   # deconv
    if size != skip:
        raise GraphConfigError(f"deconv output {size} does not meet skip size {skip}")
    size = conv_output_size(size, 3, 4, 1)          # reduce
    if size != cfg.grid:
        raise GraphConfigError(f"head grid {size} != expected {cfg.grid}")
    return plan


@dataclass
class NetworkParams:
    """Parameter snapshot: config, seed, and one (weight, bias) pair per layer."""

    config: NetConfig
    tensors: dict[str, np.ndarray]
    rng_seed: int = 0

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.rng_seed)


def init_params(cfg: NetConfig, seed: int = 0) -> NetworkParams:
    """He-uniform weights (limit sqrt(6 / fan_in)) and zero biases, fixed order."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for spec in layer_plan(cfg):
        if spec.kind == "deconv":
            shape = (spec.kernel, spec.kernel, spec.out_channels, spec.in_channels)
        else:
            shape = (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
        fan_in = spec.kernel * spec.kernel * spec.in_channels
        limit = math.sqrt(6.0 / fan_in)
        tensors[f"{spec.name}.w"] = rng.uniform(-limit, limit, size=shape)
        tensors[f"{spec.name}.b"] = np.zeros(spec.out_channels)
    return NetworkParams(cfg, tensors, rng_seed=seed)


@dataclass(frozen=True)
class HeadOutput:
    """Per-anchor predictions plus the generating anchor grid."""

    cls_logits: np.ndarray    # [G, G, A, C+1]
    loc_offsets: np.ndarray   # [G, G, A, 4]
    default_boxes: list[Box]  # length G*G*A, row-major (gy, gx, a)

    def flat_logits(self) -> np.ndarray:
        g, _, a, cc = self.cls_logits.shape
        return self.cls_logits.reshape(g * g * a, cc)

    def flat_offsets(self) -> np.ndarray:
        g, _, a, _ = self.loc_offsets.shape
        return self.loc_offsets.reshape(g * g * a, 4)


@lru_cache(maxsize=None)
def default_box_array(cfg: NetConfig) -> np.ndarray:
    """[G*G*A, 4] anchor (cx, cy, w, h) in image units, row-major (gy, gx, a)."""
    g = cfg.grid
    cell = cfg.image_size / g
    rows = []
    for gy in range(g):
        for gx in range(g):
            cx = (gx + 0.5) * cell
            cy = (gy + 0.5) * cell
            for s in cfg.scales:
                for ar in cfg.aspect_ratios:
                    w = s * math.sqrt(ar) * cfg.image_size
                    h = s / math.sqrt(ar) * cfg.image_size
                    rows.append((cx, cy, w, h))
    arr = np.array(rows)
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=None)
def _default_box_tuple(cfg: NetConfig) -> tuple[Box, ...]:
    return tuple(Box(*row) for row in default_box_array(cfg))


def default_box_list(cfg: NetConfig) -> list[Box]:
    return list(_default_box_tuple(cfg))


def forward(params: NetworkParams, image: np.ndarray, want_cache: bool = False):
    """Run the network on one [H, W, C] image.

    Returns HeadOutput, or (HeadOutput, cache) when want_cache is set; the
    cache feeds backward().
    """
    cfg = params.config
    if image.shape != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise GraphConfigError(
            f"image shape {image.shape} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})"
        )
    t = params.tensors
    cache: dict = {}

    pre, cache["stem"] = conv2d_forward(image, Kernel(t["stem.w"]), 1, 1, t["stem.b"])
    x = np.maximum(pre, 0.0)
    cache["stem.pre"] = pre
    skip, cache["pool1"] = maxpool2_forward(x)

    pre, cache["conv2"] = conv2d_forward(skip, Kernel(t["conv2.w"]), 1, 1, t["conv2.b"])
    x = np.maximum(pre, 0.0)
    cache["conv2.pre"] = pre
    x, cache["pool2"] = maxpool2_forward(x)

    for i, rate in enumerate(cfg.dilation_rates, start=1):
        x, cache[f"dil{i}"] = dilated_conv_forward(
            x, Kernel(t[f"dil{i}.w"], dilation=rate), t[f"dil{i}.b"]
        )

    up, cache["deconv"] = conv_transpose2d_forward(x, t["deconv.w"], 2, 1, t["deconv.b"])
    pre = up + skip
    hyper = np.maximum(pre, 0.0)
    cache["hyper.pre"] = pre

    pre, cache["reduce"] = conv2d_forward(hyper, Kernel(t["reduce.w"]), 4, 1, t["reduce.b"])
    feat = np.maximum(pre, 0.0)
    cache["reduce.pre"] = pre

    cls_map, cache["cls_head"] = conv2d_forward(feat, Kernel(t["cls_head.w"]), 1, 1, t["cls_head.b"])
    loc_map, cache["loc_head"] = conv2d_forward(feat, Kernel(t["loc_head.w"]), 1, 1, t["loc_head.b"])

    g, a = cfg.grid, cfg.anchors_per_cell
    head = HeadOutput(
        cls_logits=cls_map.reshape(g, g, a, cfg.num_classes + 1),
        loc_offsets=loc_map.reshape(g, g, a, 4),
        default_boxes=default_box_list(cfg),
    )
    if want_cache:
        return head, cache
    return head


def backward(params: NetworkParams, cache: dict, grad_cls: np.ndarray,
             grad_loc: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter tensor.

    grad_cls is [G, G, A, C+1] and grad_loc [G, G, A, 4], the loss gradients
    w.r.t. the head outputs (zero rows for samples outside the loss batch).
    """
    cfg = params.config
    g, a = cfg.grid, cfg.anchors_per_cell
    grads: dict[str, np.ndarray] = {}

    g_cls_map = grad_cls.reshape(g, g, a * (cfg.num_classes + 1))
    g_loc_map = grad_loc.reshape(g, g, a * 4)
    g_feat_c, grads["cls_head.w"], grads["cls_head.b"] = conv2d_backward(g_cls_map, cache["cls_head"])
    g_feat_l, grads["loc_head.w"], grads["loc_head.b"] = conv2d_backward(g_loc_map, cache["loc_head"])
    g_feat = (g_feat_c + g_feat_l) * (cache["reduce.pre"] > 0.0)

    g_hyper, grads["reduce.w"], grads["reduce.b"] = conv2d_backward(g_feat, cache["reduce"])
    g_pre = g_hyper * (cache["hyper.pre"] > 0.0)
    g_up = g_pre
    g_skip_from_add = g_pre

    g_x, grads["deconv.w"], grads["deconv.b"] = conv_transpose2d_backward(g_up, cache["deconv"])

    for i in range(len(cfg.dilation_rates), 0, -1):
        g_x, grads[f"dil{i}.w"], grads[f"dil{i}.b"] = dilated_conv_backward(g_x, cache[f"dil{i}"])

    g_x = maxpool2_backward(g_x, cache["pool2"])
    g_x = g_x * (cache["conv2.pre"] > 0.0)
    g_skip, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(g_x, cache["conv2"])

    g_skip = g_skip + g_skip_from_add
    g_x = maxpool2_backward(g_skip, cache["pool1"])
    g_x = g_x * (cache["stem.pre"] > 0.0)
    # the image is not a parameter, so the stem input gradient is never needed
    _, grads["stem.w"], grads["stem.b"] = _conv_raw_backward(g_x, cache["stem"], need_gx=False)
    return grads


def deconv_skip_forward(deep: np.ndarray, skip: np.ndarray, w: np.ndarray,
                        bias: Optional[np.ndarray] = None):
    """ReLU(transposed_conv(deep) + skip); sizes must agree at build time."""
    up, cache = conv_transpose2d_forward(deep, w, 2, 1, bias)
    if up.shape != skip.shape:
        raise GraphConfigError(f"deconv output {up.shape} vs skip {skip.shape}")
    pre = up + skip
    return np.maximum(pre, 0.0), (cache, pre)


# --- Adam ---------------------------------------------------------------


def adam_init(params: NetworkParams) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.tensors.items()},
        "v": {k: np.zeros_like(v) for k, v in params.tensors.items()},
    }


def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; mutates params and state in place."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# --- box encoding and decoding -------------------------------------------


def encode_offsets(target: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets (dcx/aw, dcy/ah, log w ratio, log h ratio) of target vs anchor boxes."""
    t = np.empty_like(target, dtype=np.float64)
    t[..., 0] = (target[..., 0] - anchors[..., 0]) / anchors[..., 2]
    t[..., 1] = (target[..., 1] - anchors[..., 1]) / anchors[..., 3]
    t[..., 2] = np.log(target[..., 2] / anchors[..., 2])
    t[..., 3] = np.log(target[..., 3] / anchors[..., 3])
    return t


def decode_offsets(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode_offsets; log-size offsets clamp at +-MAX_LOG_SIZE_OFFSET."""
    b = np.empty_like(offsets, dtype=np.float64)
    b[..., 0] = offsets[..., 0] * anchors[..., 2] + anchors[..., 0]
    b[..., 1] = offsets[..., 1] * anchors[..., 3] + anchors[..., 1]
    logs = np.clip(offsets[..., 2:4], -MAX_LOG_SIZE_OFFSET, MAX_LOG_SIZE_OFFSET)
    b[..., 2] = anchors[..., 2] * np.exp(logs[..., 0])
    b[..., 3] = anchors[..., 3] * np.exp(logs[..., 1])
    return b


def decode_detections(head: HeadOutput, score_thr: float, nms_thr: float) -> list[Detection]:
    """SSD-style decoding: softmax scores minus background, threshold, per-class NMS."""
    if not (0.0 < score_thr < 1.0 and 0.0 < nms_thr < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    logits = head.flat_logits()
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    anchors = np.array([(b.cx, b.cy, b.w, b.h) for b in head.default_boxes])
    boxes = decode_offsets(head.flat_offsets(), anchors)
    num_classes = logits.shape[1] - 1
    raw: list[Detection] = []
    for cls in range(1, num_classes + 1):
        keep = np.flatnonzero(probs[:, cls] >= score_thr)
        for i in keep:
            raw.append(Detection(cls, float(probs[i, cls]), Box(*boxes[i])))
    return nms(raw, nms_thr)


# --- parameter snapshots ---------------------------------------------------
#
# Byte layout (little-endian):
#   magic "BDET" | uint32 version | uint32 header_len | header JSON (utf-8)
#   | per tensor, in header order: raw float64 row-major data
# Header: {"config": {...}, "rng_seed": int,
#          "tensors": [{"name": str, "shape": [int, ...]}, ...]}


def save_params(path, params: NetworkParams) -> None:
    header = {
        "config": asdict(params.config),
        "rng_seed": params.rng_seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(SNAPSHOT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    version = int.from_bytes(buf.read(4), "little")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    header_len = int.from_bytes(buf.read(4), "little")
    header = json.loads(buf.read(header_len).decode("utf-8"))
    hc = dict(header["config"])
    for key in ("dilation_rates", "scales", "aspect_ratios"):
        hc[key] = tuple(hc[key])
    cfg = NetConfig(**hc)
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(count * 8), dtype="<f8").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return NetworkParams(cfg, tensors, rng_seed=int(header["rng_seed"]))
