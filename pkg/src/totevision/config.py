"""Run configuration: one structured-text file with a section per component.

```yaml
task: identification
train:   {batch_size: 16, learning_rate: 2.0e-4, max_epochs: 50}
dataset: {seed: 0}
backbone: {preset: base}
```

Overrides are ``section.key=value`` strings; values are parsed as YAML
scalars and must match the type of the field they replace.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .backbone import PRESETS, BackboneConfig
from .data.datasets import DatasetConfig
from .defect import DefectConfig
from .errors import ConfigError
from .ident import IdentConfig
from .seg.model import SegHeadConfig

TASKS = ("segmentation", "identification", "defect")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 2e-4
    max_epochs: int = 50
    early_stop_patience: int = 5
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    # global gradient-norm cap; None disables clipping
    grad_clip: float | None = 1.0
    seed: int = 0
    deterministic: bool = True
    # wall-clock cap in seconds; training stops before an epoch that would overrun it
    time_budget: float | None = None
    # "metric": keep the epoch with the best validation metric; "loss": lowest validation loss
    select_by: str = "metric"
    # permutation control for the defect task
    shuffle_labels: bool = False
    # read splits from a directory written by gen-data instead of generating in memory
    data_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.early_stop_patience < 0 or self.early_stop_patience > self.max_epochs:
            raise ConfigError("early_stop_patience must lie in [0, max_epochs]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.time_budget is not None and (
            isinstance(self.time_budget, bool) or not isinstance(self.time_budget, (int, float)) or self.time_budget <= 0
        ):
            raise ConfigError(f"time_budget must be a positive number of seconds, got {self.time_budget!r}")
        if self.grad_clip is not None and (
            isinstance(self.grad_clip, bool) or not isinstance(self.grad_clip, (int, float)) or self.grad_clip <= 0
        ):
            raise ConfigError(f"grad_clip must be a positive number or null, got {self.grad_clip!r}")
        if self.data_dir is not None and not isinstance(self.data_dir, str):
            raise ConfigError(f"data_dir must be a path string, got {self.data_dir!r}")
        if self.select_by not in ("metric", "loss"):
            raise ConfigError(f"select_by must be 'metric' or 'loss', got {self.select_by!r}")


@dataclass(frozen=True)
class RunConfig:
    task: str = "segmentation"
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    seg_head: SegHeadConfig = field(default_factory=SegHeadConfig)
    ident_head: IdentConfig = field(default_factory=IdentConfig)
    defect_head: DefectConfig = field(default_factory=DefectConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task == "identification" and self.train.batch_size < 2:
            raise ConfigError("identification needs batch_size >= 2 (in-batch negatives)")
        if self.dataset.image_size != self.backbone.image_size:
            raise ConfigError(
                f"dataset.image_size={self.dataset.image_size} does not match "
                f"backbone.image_size={self.backbone.image_size}"
            )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "train": dataclasses.asdict(self.train),
            "dataset": self.dataset.to_dict(),
            "backbone": self.backbone.to_dict(),
            "seg_head": self.seg_head.to_dict(),
            "ident_head": self.ident_head.to_dict(),
            "defect_head": self.defect_head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d or {})
        extra = set(d) - {f.name for f in dataclasses.fields(cls)}
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        kw: dict[str, Any] = {}
        if "task" in d:
            kw["task"] = d["task"]
        if "train" in d:
            kw["train"] = _build(TrainConfig, d["train"], "train")
        if "dataset" in d:
            kw["dataset"] = DatasetConfig.from_dict(d["dataset"])
        if "backbone" in d:
            kw["backbone"] = _backbone(d["backbone"])
        if "seg_head" in d:
            kw["seg_head"] = SegHeadConfig.from_dict(d["seg_head"])
        if "ident_head" in d:
            kw["ident_head"] = IdentConfig.from_dict(d["ident_head"])
        if "defect_head" in d:
            kw["defect_head"] = DefectConfig.from_dict(d["defect_head"])
        return cls(**kw)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, d: Mapping, section: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    extra = set(d) - {f.name for f in dataclasses.fields(cls)}
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    return cls(**d)


def _backbone(d: Mapping) -> BackboneConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is None:
        return BackboneConfig.from_dict(d)
    if preset not in PRESETS:
        raise ConfigError(f"unknown backbone preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset].to_dict()
    base.update(d)
    return BackboneConfig.from_dict(base)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def _coerce(value: Any, current: Any, key: str) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(current, (list, tuple)):
        if not isinstance(value, (list, tuple)) or len(value) != len(current):
            raise ConfigError(f"{key} expects a list of length {len(current)}, got {value!r}")
        return list(value)
    if isinstance(current, Mapping):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key} expects a mapping, got {value!r}")
        return dict(value)
    return value


def apply_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` (or ``task=...``) overrides with type checks."""
    d = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw) if raw else ""
        except yaml.YAMLError:
            value = raw
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = _coerce(value, node[leaf], key)
    return RunConfig.from_dict(d)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Set the seed of every seeded component."""
    return replace(
        config,
        train=replace(config.train, seed=seed),
        dataset=replace(config.dataset, seed=seed),
        backbone=replace(config.backbone, seed=seed),
    )


__all__ = ["TrainConfig", "RunConfig", "load_config", "apply_overrides", "with_seed", "TASKS"]
