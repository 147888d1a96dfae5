"""Deterministic synthetic scenes with an injectable annotation-noise model.

Images are 8-bit grayscale: weak textured background plus 1-3 bright filled
shapes (disc / square / triangle, class ids 1..3). Annotation noise mimics a
sloppy labeling process: spurious boxes over plain background, deleted
annotations, and randomized class labels. Every corruption is recorded in a
ledger so the clean annotation set can be reconstructed exactly.

Per-image randomness derives from (seed, image index), so generation is
reproducible image-by-image and parallelizable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, GroundTruthObject, iou

CLASS_NAMES = ("disc", "square", "triangle")

# spurious labels must be genuinely background: max IoU against true objects
SPURIOUS_MAX_IOU = 0.3


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.18, 0.34)  # fraction of image side
    texture: float = 0.08
    blur_sigma: float = 0.6
    brightness_jitter: float = 0.05

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError("objects_per_image must be a (lo, hi) range with 0 <= lo <= hi")
        smin, smax = self.size_range
        if not (0.0 < smin <= smax < 0.95):
            raise ValueError("size_range must keep objects inside the image")


@dataclass(frozen=True)
class NoiseModel:
    spurious_rate: float = 0.2
    drop_rate: float = 0.1
    flip_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("spurious_rate", "drop_rate", "flip_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    """Low-frequency clutter: coarse noise bilinearly upsampled to size x size."""
    coarse = rng.normal(size=(cells + 1, cells + 1))
    xs = np.linspace(0, cells, size)
    i = np.minimum(xs.astype(int), cells - 1)
    f = xs - i
    row = coarse[i][:, i]
    right = coarse[i][:, i + 1]
    down = coarse[i + 1][:, i]
    diag = coarse[i + 1][:, i + 1]
    fx = f[None, :]
    fy = f[:, None]
    return (row * (1 - fx) * (1 - fy) + right * fx * (1 - fy)
            + down * (1 - fx) * fy + diag * fx * fy)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    pad = np.pad(img, ((radius, radius), (0, 0)), mode="edge")
    out = np.empty_like(img)
    for i in range(img.shape[0]):
        out[i] = kern @ pad[i:i + 2 * radius + 1]
    pad = np.pad(out, ((0, 0), (radius, radius)), mode="edge")
    out2 = np.empty_like(img)
    for j in range(img.shape[1]):
        out2[:, j] = pad[:, j:j + 2 * radius + 1] @ kern
    return out2


def _shape_mask(cls: int, box: Box, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    x = xs + 0.5
    y = ys + 0.5
    hw, hh = box.w / 2.0, box.h / 2.0
    if cls == 1:  # disc
        return ((x - box.cx) / hw) ** 2 + ((y - box.cy) / hh) ** 2 <= 1.0
    if cls == 2:  # square
        return (np.abs(x - box.cx) <= hw) & (np.abs(y - box.cy) <= hh)
    # upward triangle inscribed in the box
    inside_y = (y >= box.cy - hh) & (y <= box.cy + hh)
    frac = np.clip((y - (box.cy - hh)) / box.h, 0.0, 1.0)
    return inside_y & (np.abs(x - box.cx) <= frac * hw)


def _sample_box(rng: np.random.Generator, spec: SceneSpec, aspect_jitter: bool) -> Box:
    size = rng.uniform(*spec.size_range) * spec.image_size
    if aspect_jitter:
        r = rng.uniform(0.85, 1.18)
        w, h = size * r, size / r
    else:
        w = h = size
    margin_x = w / 2.0 + 1.0
    margin_y = h / 2.0 + 1.0
    cx = rng.uniform(margin_x, spec.image_size - margin_x)
    cy = rng.uniform(margin_y, spec.image_size - margin_y)
    return Box(cx, cy, w, h)


def render_scene(spec: SceneSpec, seed: int, index: int):
    """One deterministic scene: returns (uint8 image, list[GroundTruthObject]).

    object_index values are local (0-based); generate_dataset renumbers them
    into a dataset-wide sequence.
    """
    rng = np.random.default_rng([seed, index])
    size = spec.image_size
    base = 0.35 + spec.brightness_jitter * rng.uniform(-1.0, 1.0)
    img = np.full((size, size), base)
    img += spec.texture * _smooth_field(rng, size)
    img += 0.5 * spec.texture * rng.normal(size=(size, size))

    lo, hi = spec.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))
    objects: list[GroundTruthObject] = []
    for local_idx in range(n_objects):
        cls = int(rng.integers(1, spec.num_classes + 1))
        box: Optional[Box] = None
        for _ in range(40):
            cand = _sample_box(rng, spec, aspect_jitter=(cls != 1))
            if all(iou(cand, o.box) < 0.2 for o in objects):
                box = cand
                break
        if box is None:
            continue  # scene too crowded; place fewer objects
        level = rng.uniform(0.62, 0.9)
        mask = _shape_mask(cls, box, size)
        img[mask] = level
        objects.append(GroundTruthObject(cls, box, local_idx))

    img = _gaussian_blur(img, spec.blur_sigma)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8), objects


def generate_dataset(spec: SceneSpec, count: int, seed: int, id_prefix: str = "img",
                     first_object_index: int = 1):
    """count scenes with dataset-unique object indices.

    Returns (images, annotations, next_object_index) where images maps
    image_id -> uint8 array and annotations maps image_id -> objects.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    images: dict[str, np.ndarray] = {}
    annotations: dict[str, list[GroundTruthObject]] = {}
    next_index = first_object_index
    for i in range(count):
        image_id = f"{id_prefix}_{i:05d}"
        img, objects = render_scene(spec, seed, i)
        images[image_id] = img
        renumbered = []
        for obj in objects:
            renumbered.append(GroundTruthObject(obj.cls, obj.box, next_index))
            next_index += 1
        annotations[image_id] = renumbered
    return images, annotations, next_index


def inject_noise(
    annotations: dict[str, list[GroundTruthObject]],
    model: NoiseModel,
    spec: SceneSpec,
    first_spurious_index: Optional[int] = None,
):
    """Corrupt annotations per the noise model; returns (corrupted, ledger).

    Ledger entries (one per corruption, in application order):
      {"kind": "drop", "image_id", "object_index", "cls", "cx", "cy", "w", "h"}
      {"kind": "flip", "image_id", "object_index", "original_cls", "new_cls"}
      {"kind": "spurious", "image_id", "object_index"}
    reconstruct_clean() inverts all three exactly.
    """
    rng = np.random.default_rng([model.seed])
    if first_spurious_index is None:
        existing = [o.object_index for objs in annotations.values() for o in objs]
        first_spurious_index = (max(existing) + 1) if existing else 1
    next_index = first_spurious_index
    corrupted: dict[str, list[GroundTruthObject]] = {}
    ledger: list[dict] = []
    for image_id in sorted(annotations):
        clean_objs = annotations[image_id]
        kept: list[GroundTruthObject] = []
        for obj in clean_objs:
            if rng.random() < model.drop_rate:
                ledger.append(
                    {
                        "kind": "drop",
                        "image_id": image_id,
                        "object_index": obj.object_index,
                        "cls": obj.cls,
                        "cx": obj.box.cx,
                        "cy": obj.box.cy,
                        "w": obj.box.w,
                        "h": obj.box.h,
                    }
                )
            else:
                kept.append(obj)
        flipped: list[GroundTruthObject] = []
        for obj in kept:
            if spec.num_classes > 1 and rng.random() < model.flip_rate:
                others = [c for c in range(1, spec.num_classes + 1) if c != obj.cls]
                new_cls = int(others[rng.integers(0, len(others))])
                ledger.append(
                    {
                        "kind": "flip",
                        "image_id": image_id,
                        "object_index": obj.object_index,
                        "original_cls": obj.cls,
                        "new_cls": new_cls,
                    }
                )
                flipped.append(GroundTruthObject(new_cls, obj.box, obj.object_index))
            else:
                flipped.append(obj)
        out = flipped
        if rng.random() < model.spurious_rate:
            box = _spurious_box(rng, spec, clean_objs)
            if box is not None:
                cls = int(rng.integers(1, spec.num_classes + 1))
                out = out + [GroundTruthObject(cls, box, next_index)]
                ledger.append(
                    {"kind": "spurious", "image_id": image_id, "object_index": next_index}
                )
                next_index += 1
        corrupted[image_id] = out
    return corrupted, ledger


def _spurious_box(rng: np.random.Generator, spec: SceneSpec,
                  true_objects: Sequence[GroundTruthObject]) -> Optional[Box]:
    for _ in range(60):
        cand = _sample_box(rng, spec, aspect_jitter=False)
        if all(iou(cand, o.box) < SPURIOUS_MAX_IOU for o in true_objects):
            return cand
    return None


def reconstruct_clean(
    corrupted: dict[str, list[GroundTruthObject]],
    ledger: Sequence[dict],
) -> dict[str, list[GroundTruthObject]]:
    """Invert inject_noise using its ledger; objects come back in index order."""
    out = {image_id: list(objs) for image_id, objs in corrupted.items()}
    for entry in reversed(list(ledger)):
        image_id = entry["image_id"]
        objs = out.setdefault(image_id, [])
        if entry["kind"] == "spurious":
            out[image_id] = [o for o in objs if o.object_index != entry["object_index"]]
        elif entry["kind"] == "flip":
            out[image_id] = [
                GroundTruthObject(entry["original_cls"], o.box, o.object_index)
                if o.object_index == entry["object_index"] else o
                for o in objs
            ]
        elif entry["kind"] == "drop":
            objs.append(
                GroundTruthObject(
                    int(entry["cls"]),
                    Box(entry["cx"], entry["cy"], entry["w"], entry["h"]),
                    int(entry["object_index"]),
                )
            )
        else:
            raise ValueError(f"unknown ledger entry kind {entry['kind']!r}")
    return {k: sorted(v, key=lambda o: o.object_index) for k, v in out.items()}


# --- PGM I/O ----------------------------------------------------------------


def write_pgm(path, img: np.ndarray, comment: str = "") -> None:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if comment:
            fh.write(f"# {comment}\n".encode("ascii"))
        fh.write(f"{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


def image_to_input(img: np.ndarray) -> np.ndarray:
    """uint8 [H, W] image -> float [H, W, 1] in [0, 1] for the network."""
    return (img.astype(np.float64) / 255.0)[:, :, None]
