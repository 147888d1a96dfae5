"""Run configuration: one strict, versioned JSON document drives every command.

Unknown keys are rejected so a config file can never silently misspell an
option; the canonical-JSON digest of the document is stamped into every
output file for provenance.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .boosting import BoostConfig
from .loss import LossConfig
from .net import NetConfig
from .synth import NoiseModel, SceneSpec
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class DataSettings:
    image_size: int = 64
    num_classes: int = 3
    train_images: int = 200
    val_images: int = 100
    test_images: int = 100
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.18, 0.34)
    texture: float = 0.08
    blur_sigma: float = 0.6
    brightness_jitter: float = 0.05
    spurious_rate: float = 0.2
    drop_rate: float = 0.1
    flip_rate: float = 0.05
    noisy_splits: tuple[str, ...] = ("train",)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=self.image_size,
            num_classes=self.num_classes,
            objects_per_image=tuple(self.objects_per_image),
            size_range=tuple(self.size_range),
            texture=self.texture,
            blur_sigma=self.blur_sigma,
            brightness_jitter=self.brightness_jitter,
        )

    def noise_model(self, seed: int) -> NoiseModel:
        return NoiseModel(
            spurious_rate=self.spurious_rate,
            drop_rate=self.drop_rate,
            flip_rate=self.flip_rate,
            seed=seed,
        )


@dataclass(frozen=True)
class LossSettings:
    alpha_cls: float = 1.0
    alpha_reg: float = 1.0

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(self.alpha_cls, self.alpha_reg, num_classes)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 12
    learning_rate: float = 1e-3
    finetune_learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    match_iou: float = 0.4
    hard_mining: bool = True
    neg_pos_ratio: float = 3.0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            finetune_learning_rate=self.finetune_learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            match_iou=self.match_iou,
            hard_mining=self.hard_mining,
            neg_pos_ratio=self.neg_pos_ratio,
        )


@dataclass(frozen=True)
class NetSettings:
    stem_channels: int = 16
    mid_channels: int = 32
    dilation_rates: tuple[int, int, int, int] = (1, 2, 4, 8)
    head_channels: int = 32
    scales: tuple[float, ...] = (0.15, 0.3)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def net_config(self, image_size: int, num_classes: int) -> NetConfig:
        return NetConfig(
            image_size=image_size,
            in_channels=1,
            stem_channels=self.stem_channels,
            mid_channels=self.mid_channels,
            dilation_rates=tuple(self.dilation_rates),
            head_channels=self.head_channels,
            num_classes=num_classes,
            scales=tuple(self.scales),
            aspect_ratios=tuple(self.aspect_ratios),
        )


@dataclass(frozen=True)
class BoostSettings:
    denoise_rounds: int = 5
    hardmine_rounds: int = 7
    iou_theta: float = 0.5
    det_score_thr: float = 0.05
    det_nms_thr: float = 0.45
    clean_selection: str = "best_val"

    def boost_config(self, num_classes: int, seed: int) -> BoostConfig:
        return BoostConfig(
            denoise_rounds=self.denoise_rounds,
            hardmine_rounds=self.hardmine_rounds,
            num_classes=num_classes,
            iou_theta=self.iou_theta,
            det_score_thr=self.det_score_thr,
            det_nms_thr=self.det_nms_thr,
            clean_selection=self.clean_selection,
            seed=seed,
        )


@dataclass(frozen=True)
class EnsembleSettings:
    max_size: int = 0  # 0 means "all hard-mining detectors"
    literal_argmax_q: bool = False
    score_thr: float = 0.05
    nms_thr: float = 0.45


@dataclass(frozen=True)
class EvalSettings:
    iou_thr: float = 0.5
    fp_score_thr: float = 0.5
    monotonize_ap: bool = True


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataSettings = field(default_factory=DataSettings)
    net: NetSettings = field(default_factory=NetSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    boost: BoostSettings = field(default_factory=BoostSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


_SECTION_TYPES = {
    "data": DataSettings,
    "net": NetSettings,
    "loss": LossSettings,
    "train": TrainSettings,
    "boost": BoostSettings,
    "ensemble": EnsembleSettings,
    "eval": EvalSettings,
}


def _build_section(cls, doc: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")
    kwargs: dict[str, Any] = {}
    for name, value in doc.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    known = {"schema_version", "seed"} | set(_SECTION_TYPES)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        body = doc.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _build_section(cls, body, name)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(schema_version=SCHEMA_VERSION, seed=seed, **sections)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
