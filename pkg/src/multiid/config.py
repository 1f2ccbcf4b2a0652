"""Run configuration: one JSON file plus flag overrides, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "MULTIID_SEED"


@dataclass
class DataConfig:
    num_clips: int = 20
    num_ids: int = 2
    frames: int = 16
    height: int = 32
    width: int = 32
    frame_stride: int = 1
    augment: bool = True


@dataclass
class DiffusionConfig:
    steps: int = 50
    guidance: float = 6.0
    train_steps: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    corpus_dir: str = "runs/corpus"
    ckpt_dir: str = "runs/ckpt"
    report_dir: str = "runs/report"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides; stage-specific defaults fill the rest

    def train_config(self, stage: int, **overrides) -> TrainConfig:
        kw = {"seed": self.seed, "train_steps": self.diffusion.train_steps}
        kw.update(self.train)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        kw["stage"] = stage
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "diffusion": DiffusionConfig}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"stage"}


def _build(cls, values: dict, prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {prefix!r} must be an object", prefix)
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}", prefix + key)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {prefix.rstrip('.') or 'root'!r}: {exc}", prefix.rstrip(".")) from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown config key {key!r}", key)
    kw = {k: v for k, v in raw.items() if k not in _SECTIONS and k != "train"}
    for name, cls in _SECTIONS.items():
        kw[name] = _build(cls, raw.get(name, {}), name + ".")
    train = raw.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("section 'train' must be an object", "train")
    for key in train:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown config key {'train.' + key!r}", "train." + key)
    kw["train"] = dict(train)
    if "seed" not in raw:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                kw["seed"] = int(env)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}", SEED_ENV) from exc
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer", "seed")
    for stage in (0, 1, 2):
        try:
            cfg.train_config(stage)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train section: {exc}", "train") from exc
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults), then apply dotted-key ``overrides`` (flags win)."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", "config") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}", "config") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object", "config")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(raw)
