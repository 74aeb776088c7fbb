"""Declarative experiment configuration.

Sections mirror the dotted override keys, e.g. ``--set diffusion.solver=rk4``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion import SOLVERS
from .geometry import ROTATION_REPRS

DECODE_LAYERS = ("3", "4", "L")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "loop"
    num_poses: int = 66
    scale: float = 20.0  # trajectory diameter, meters
    image_height: int = 64
    image_width: int = 64
    window_size: int = 3
    stride: int = 1
    seed: int = 0
    split: str = "train"
    num_landmarks: int = 96


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    diffusion_stages: tuple[int, ...] = (4,)
    branched_decoder: bool = True
    decode_stage3_diffused: bool = False
    max_frames: int = 11


@dataclass
class GraphConfig:
    topology: str = "complete"


@dataclass
class DiffusionSection:
    t0: float = 0.0
    t1: float = 1.0
    t2: float = 2.0
    solver: str = "euler"
    steps_per_unit: int = 5
    heads: int = 8
    dot_scaling: bool = False
    vector_blocks: int = 2


@dataclass
class LossConfig:
    norm: str = "l1"
    init_alpha: float = 0.0
    init_beta: float = -3.0
    init_gamma: float = 0.0
    init_lambda: float = -3.0
    decode_layers: tuple[str, ...] = DECODE_LAYERS
    rotation_repr: str = "log_quaternion"


@dataclass
class AugmentConfig:
    crop: bool = False
    color_jitter: bool = True
    noise: bool = False


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    steps: int = 2000
    epochs: int | None = None
    seed: int = 0
    schedule: str = "cosine"
    log_every: int = 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> Config:
        cfg = _build(cls, raw or {}, "")
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: list[str] | tuple[str, ...]) -> Config:
        raw = self.to_dict()
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            node = raw
            *parents, leaf = key.strip().split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = yaml.safe_load(value)
        return Config.from_dict(raw)

    def validate(self) -> None:
        from .graphs import TOPOLOGIES

        if self.graph.topology not in TOPOLOGIES or self.graph.topology == "chain":
            raise ConfigError(f"graph.topology must be complete, grid or self_cross, got {self.graph.topology!r}")
        if self.diffusion.solver not in SOLVERS:
            raise ConfigError(f"diffusion.solver must be one of {SOLVERS}")
        if not self.diffusion.t0 < self.diffusion.t1 < self.diffusion.t2:
            raise ConfigError("diffusion times must satisfy t0 < t1 < t2")
        if self.loss.norm not in ("l1", "l2"):
            raise ConfigError("loss.norm must be l1 or l2")
        if self.loss.rotation_repr not in ROTATION_REPRS:
            raise ConfigError(f"loss.rotation_repr must be one of {ROTATION_REPRS}")
        bad = set(self.loss.decode_layers) - set(DECODE_LAYERS)
        if bad or "L" not in self.loss.decode_layers:
            raise ConfigError(f"loss.decode_layers must include 'L' and be a subset of {DECODE_LAYERS}")
        if set(self.model.diffusion_stages) - {3, 4}:
            raise ConfigError("model.diffusion_stages must be a subset of {3, 4}")
        if len(self.model.widths) != 4:
            raise ConfigError("model.widths needs one width per stage (4)")
        if not 1 <= self.data.window_size <= self.model.max_frames:
            raise ConfigError(f"data.window_size must be in [1, {self.model.max_frames}]")
        if self.train.schedule not in ("constant", "cosine"):
            raise ConfigError("train.schedule must be constant or cosine")
        if self.train.lr <= 0 or self.train.weight_decay < 0:
            raise ConfigError("train.lr must be positive and weight_decay non-negative")


def _build(cls, raw: dict[str, Any], prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple):
            if isinstance(value, (int, float, str)):
                value = [value]
            kwargs[name] = tuple(type(default[0])(v) if default else v for v in value)
        elif isinstance(default, bool):
            kwargs[name] = bool(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides=()) -> Config:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    return Config.from_dict(raw).with_overrides(list(overrides))
