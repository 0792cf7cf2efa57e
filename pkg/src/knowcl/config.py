"""Run configuration: one JSON document drives every stage."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .datacube import SynthSpec
from .patcher import AugmentConfig
from .trainer import TrainConfig

PROTOCOLS = ("knn", "linear", "head")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataPaths:
    cube: str
    gt: str


@dataclass(frozen=True)
class SplitConfig:
    ratio: float | dict = 0.3
    # which pixels feed the unlabeled stream: the training pixels with labels
    # withheld, or every pixel of the scene
    unlabeled_pool: str = "train"

    def __post_init__(self):
        if self.unlabeled_pool not in ("train", "scene"):
            raise ConfigError(f"split.unlabeled_pool must be 'train' or 'scene', got {self.unlabeled_pool!r}")


@dataclass(frozen=True)
class PcaConfig:
    n_components: int = 5
    fit_on: str = "scene"

    def __post_init__(self):
        if self.fit_on not in ("scene", "train"):
            raise ConfigError(f"pca.fit_on must be 'scene' or 'train', got {self.fit_on!r}")
        if self.n_components < 1:
            raise ConfigError("pca.n_components must be positive")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    tau_knn: float = 0.07
    protocols: tuple[str, ...] = ("knn",)
    linear_epochs: int = 100
    linear_lr: float = 0.01
    pooling: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "protocols", tuple(self.protocols))
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"unknown eval protocols {bad}; choose from {PROTOCOLS}")
        if self.pooling not in ("auto", "cls", "mean"):
            raise ConfigError(f"eval.pooling must be auto, cls or mean, got {self.pooling!r}")


_BACKBONE_KEYS = {"variant", "token_patch", "embed_dim", "depth", "num_heads", "mlp_ratio",
                  "drop_path_rate", "head_hidden", "head_dropout", "projection_dim"}


@dataclass(frozen=True)
class RunConfig:
    name: str = "synth"
    synth: SynthSpec | None = None
    data: DataPaths | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    pca: PcaConfig = field(default_factory=PcaConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def backbone_config(self, num_classes: int) -> BackboneConfig:
        overrides = dict(self.backbone)
        variant = overrides.pop("variant", "vit_hsi")
        return BackboneConfig.preset(
            variant,
            in_channels=self.pca.n_components,
            input_size=self.augment.canonical_size,
            num_classes=num_classes,
            **overrides,
        )

    def with_overrides(self, section: str, **values) -> "RunConfig":
        current = getattr(self, section)
        if section == "backbone":
            return dataclasses.replace(self, backbone={**current, **values})
        return dataclasses.replace(self, **{section: dataclasses.replace(current, **values)})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, data: Any, name: str, required: tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(f'{name}.{k}' for k in unknown)}")
    for key in required:
        if key not in data:
            raise ConfigError(f"missing config key '{name}.{key}'")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}")
    kw: dict[str, Any] = {}
    if "name" in raw:
        kw["name"] = str(raw["name"])
    if "synth" in raw:
        kw["synth"] = _section(SynthSpec, raw["synth"], "synth",
                               required=("rows", "cols", "bands", "num_classes"))
    if "data" in raw:
        kw["data"] = _section(DataPaths, raw["data"], "data", required=("cube", "gt"))
    if "split" in raw:
        kw["split"] = _section(SplitConfig, raw["split"], "split")
    if "pca" in raw:
        kw["pca"] = _section(PcaConfig, raw["pca"], "pca")
    if "augment" in raw:
        kw["augment"] = _section(AugmentConfig, raw["augment"], "augment")
    if "backbone" in raw:
        bb = raw["backbone"]
        if not isinstance(bb, dict):
            raise ConfigError("config section 'backbone' must be an object")
        unknown = sorted(set(bb) - _BACKBONE_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join('backbone.' + k for k in unknown)}")
        kw["backbone"] = dict(bb)
    if "train" in raw:
        kw["train"] = _section(TrainConfig, raw["train"], "train")
    if "eval" in raw:
        kw["eval"] = _section(EvalConfig, raw["eval"], "eval")
    cfg = RunConfig(**kw)
    try:
        cfg.backbone_config(num_classes=max(2, cfg.synth.num_classes if cfg.synth else 2))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid backbone section: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
