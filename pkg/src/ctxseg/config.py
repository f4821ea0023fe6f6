"""Run configuration: YAML file sections merged with command-line overrides.

Sections and defaults::

    model:  ModelConfig fields   (patch_size 32, encoder_channels [8,16,16], ...)
    train:  TrainConfig fields   (lr 0.0001, batch_size 16, epochs 30, ...)
    task:   SyntheticTaskConfig  (image_size 256, context_radius 4, ...)
    paths:  data_dir "data", out_dir "runs"
    split:  [0.8, 0.2, 0.0]      train / val / test fractions for ``generate``
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError
from .model import ModelConfig
from .synthetic import SyntheticTaskConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    data_dir: str = "data"
    out_dir: str = "runs"
    split: tuple = (0.8, 0.2, 0.0)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "paths": {"data_dir": self.data_dir, "out_dir": self.out_dir},
            "split": list(self.split),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.task.validate()
        return self


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    return sec


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a mapping at top level")
    unknown = set(raw) - {"model", "train", "task", "paths", "split"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(_section(raw, "model"))
        train = TrainConfig.from_dict(_section(raw, "train"))
        task_raw = _section(raw, "task")
        unknown_task = set(task_raw) - set(SyntheticTaskConfig().to_dict())
        if unknown_task:
            raise ConfigurationError(f"unknown task config keys: {sorted(unknown_task)}")
        task = SyntheticTaskConfig(**task_raw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    paths = _section(raw, "paths")
    unknown_paths = set(paths) - {"data_dir", "out_dir"}
    if unknown_paths:
        raise ConfigurationError(f"unknown paths keys: {sorted(unknown_paths)}")
    split = tuple(raw.get("split", (0.8, 0.2, 0.0)))
    return RunConfig(model, train, task, str(paths.get("data_dir", "data")),
                     str(paths.get("out_dir", "runs")), split)


def load(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p}: malformed YAML: {exc}") from exc
    return from_dict(raw)


def apply_overrides(cfg: RunConfig, seed=None, context=None, patch_size=None, epochs=None, lr=None,
                    out=None) -> RunConfig:
    """Command-line values win over file values."""
    if seed is not None:
        cfg.model.seed = cfg.train.seed = cfg.task.seed = seed
    if context is not None:
        cfg.model.context_enabled = context == "on"
    if patch_size is not None:
        cfg.model.patch_size = cfg.task.patch_size = patch_size
    if epochs is not None:
        cfg.train.epochs = epochs
    if lr is not None:
        cfg.train.lr = lr
    if out is not None:
        cfg.out_dir = out
    return cfg
