"""Experiment configuration.

Every block is a plain dataclass so a resolved run config can be dumped to
YAML and loaded back without loss. Validation happens once, in
``ExperimentConfig.validate``, before any work starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

IGNORE_INDEX = 255
EPS = 1e-8


class ConfigError(ValueError):
    """Invalid configuration field."""


@dataclass
class AugmentConfig:
    jitter_strength: float = 0.5
    cutout_size: int = 16
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop_size: tuple[int, int] = (64, 64)
    hflip_prob: float = 0.5
    # fill colour for CutOut and for padding after down-scaling
    mean_color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def validate(self) -> None:
        if self.jitter_strength < 0:
            raise ConfigError("augment.jitter_strength must be >= 0")
        if self.cutout_size < 0:
            raise ConfigError("augment.cutout_size must be >= 0 (0 disables CutOut)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("augment.scale_range must satisfy 0 < lo <= hi")
        if min(self.crop_size) < 16:
            raise ConfigError("augment.crop_size must be at least 16x16")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("augment.hflip_prob must lie in [0, 1]")


FUSION_PRESETS = {
    "low_data": {"gamma": 0.5, "temperature": 0.5},
    "high_data": {"gamma": 0.3, "temperature": 0.7},
}


@dataclass
class FusionConfig:
    gamma: float = 0.5
    temperature: float = 0.5
    mode: str = "soft"
    hard_threshold: float = 0.5
    # where the pseudo label comes from: calibrated fusion or a single branch
    source: str = "fusion"

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "FusionConfig":
        if name not in FUSION_PRESETS:
            raise ConfigError(f"unknown fusion preset {name!r}")
        return cls(**{**FUSION_PRESETS[name], **overrides})

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("fusion.gamma must lie in [0, 1]")
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError("fusion.temperature must lie in (0, 1]")
        if self.mode not in ("soft", "hard"):
            raise ConfigError("fusion.mode must be 'soft' or 'hard'")
        if not 0.0 < self.hard_threshold < 1.0:
            raise ConfigError("fusion.hard_threshold must lie in (0, 1)")
        if self.source not in ("fusion", "decoder_only", "sgc_only"):
            raise ConfigError("fusion.source must be fusion, decoder_only or sgc_only")


TRAIN_MODES = ("unlabeled", "image_level", "supervised_only")


@dataclass
class TrainConfig:
    iterations: int = 600
    base_lr: float = 0.005
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    mode: str = "unlabeled"
    eval_every: int = 200
    checkpoint_every: int = 0
    seed: int = 0
    debug_audit: bool = False

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ConfigError("train batch sizes must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be > 0")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"train.mode must be one of {TRAIN_MODES}")


@dataclass
class ModelConfig:
    num_classes: int = 4
    backbone: str = "desk"
    embed_dim: int = 16
    # "hypercolumn" (last two stages) or "last" (last stage only)
    features: str = "hypercolumn"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2")
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {self.backbone!r}")
        if self.backbone in ("xception65", "resnet101"):
            raise ConfigError(f"backbone {self.backbone!r} needs pretrained weights, which are not shipped")
        if self.features not in ("hypercolumn", "last"):
            raise ConfigError("model.features must be 'hypercolumn' or 'last'")


# (stage widths, decoder width). The large presets are named for
# documentation only; they would need pretrained weights.
BACKBONE_PRESETS = {
    "desk": ((16, 32, 48, 48), 32),
    "desk_wide": ((24, 48, 64, 64), 48),
    "tiny": ((4, 6, 8, 8), 8),
    "xception65": None,
    "resnet101": None,
}


@dataclass
class DataConfig:
    source: str = "shapes"
    root: str | None = None
    canvas: tuple[int, int] = (64, 64)
    num_train: int = 528
    num_val: int = 64
    fraction: str = "16/528"
    split_seed: int = 1
    min_class_pixels: int = 64
    data_seed: int = 0
    hue_noise: float = 0.12
    shape_size: tuple[float, float] = (0.2, 0.38)
    illumination: float = 0.0

    def fraction_value(self) -> Fraction:
        return parse_fraction(self.fraction)

    def validate(self) -> None:
        if self.source not in ("shapes", "voc_dir"):
            raise ConfigError("data.source must be 'shapes' or 'voc_dir'")
        if self.source == "voc_dir" and not self.root:
            raise ConfigError("data.root is required for voc_dir")
        try:
            frac = self.fraction_value()
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"data.fraction is not a rational: {self.fraction!r}") from exc
        if not 0 < frac <= 1:
            raise ConfigError("data.fraction must lie in (0, 1]")
        if min(self.canvas) < 64:
            raise ConfigError("data.canvas must be at least 64x64")
        if self.hue_noise < 0:
            raise ConfigError("data.hue_noise must be >= 0")
        if not 0 < self.shape_size[0] <= self.shape_size[1] < 0.5:
            raise ConfigError("data.shape_size must satisfy 0 < lo <= hi < 0.5")
        if self.illumination < 0:
            raise ConfigError("data.illumination must be >= 0")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        for name in ("data", "model", "train", "fusion", "augment"):
            try:
                getattr(self, name).validate()
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"invalid value in {name}: {exc}") from exc
        if self.data.source == "shapes" and self.model.num_classes not in (2, 3, 4):
            raise ConfigError("model.num_classes must be 2, 3 or 4 for the shapes data")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        blocks = {
            "data": DataConfig,
            "model": ModelConfig,
            "train": TrainConfig,
            "fusion": FusionConfig,
            "augment": AugmentConfig,
        }
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key in blocks:
                kwargs[key] = _build(blocks[key], value or {}, key)
            elif key == "output_dir":
                kwargs[key] = str(value)
            else:
                raise ConfigError(f"unknown config block {key!r}")
        return cls(**kwargs)

    def replace(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"fusion.gamma": 1.0})``."""
        raw = self.to_dict()
        for path, value in dotted.items():
            node = raw
            *parents, leaf = path.split(".")
            for p in parents:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config field {path!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config field {path!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(raw)


def _build(cls, values: dict, block: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {block}: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, tuple) and value is not None:
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def parse_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10_000)
    return Fraction(str(value).strip())


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
