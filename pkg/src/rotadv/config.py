"""Run configuration: one YAML/JSON file plus command-line overrides.

Key hierarchy (every key optional; defaults shown)::

    seed: 0
    out: runs/default
    workers: 1
    data:
      path: null            # load this dataset file instead of generating
      classes: [sphere, cube, cylinder, cone, torus, pyramid, ellipsoid, capsule]
      per_class: 130
      test_per_class: 30
      points_per_cloud: 256
      jitter: 0.01
    model:   {h1: 64, h2: 128, h3: 64}
    train:   {epochs: 20, lr: 0.02, lr_min: 0.0, schedule: cosine, batch_size: 32, momentum: 0.9}
    attack:  {steps: 10, step_size: 0.01, bound: 3.14159..., random_start: true,
              objective: cw, restarts: 1, batch_size: 17}
    defense: {epochs: 50, one_step_epochs: 200, iterations: 10, lr: 0.01, lr_min: 0.0,
              schedule: cosine, batch_size: 32, momentum: 0.9, bound: 3.14159...,
              mixed_clean: false, use_pool: true,
              ensemble: [{h1: 32, seed: 1}, {h1: 128, seed: 2}]}
    eval:    {protocols: [clean, random, attack], bound: 3.14159...}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from rotadv.attack import AttackConfig
from rotadv.data import SHAPES
from rotadv.errors import ConfigurationError
from rotadv.training import TrainConfig


def _canonical(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _canonical(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return repr(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    return obj


def config_digest(*objs) -> str:
    """Short stable hash of any mix of dataclasses, dicts and scalars."""
    blob = json.dumps([_canonical(o) for o in objs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    classes: tuple[str, ...] = SHAPES
    per_class: int = 130
    test_per_class: int = 30
    points_per_cloud: int = 256
    jitter: float = 0.01


@dataclass(frozen=True)
class ModelConfig:
    h1: int = 64
    h2: int = 128
    h3: int = 64


@dataclass(frozen=True)
class EnsembleMember:
    h1: int = 64
    h2: int = 128
    h3: int = 64
    seed: int = 1


@dataclass(frozen=True)
class DefenseSettings:
    epochs: int = 50
    one_step_epochs: int = 200
    iterations: int = 10
    lr: float = 0.01
    lr_min: float = 0.0
    schedule: str = "cosine"
    batch_size: int = 32
    momentum: float = 0.9
    bound: float = math.pi
    mixed_clean: bool = False
    use_pool: bool = True
    ensemble: tuple[EnsembleMember, ...] = (EnsembleMember(h1=32, seed=1), EnsembleMember(h1=128, seed=2))


@dataclass(frozen=True)
class EvalConfig:
    protocols: tuple[str, ...] = ("clean", "random", "attack")
    bound: float = math.pi


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.02))
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseSettings = field(default_factory=DefenseSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def digest(self) -> str:
        # output location and worker count do not change results
        return config_digest(dataclasses.replace(self, out="", workers=1))


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "attack": AttackConfig,
    "defense": DefenseSettings,
    "eval": EvalConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if key == "ensemble":
            value = tuple(_build(EnsembleMember, v, f"{where}.ensemble") for v in value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"seed", "out", "workers"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {k: raw[k] for k in ("seed", "out", "workers") if k in raw}
    for name, cls in _SECTIONS.items():
        if name in raw:
            base = dataclasses.asdict(getattr(RunConfig(), name))
            base.update(raw[name] or {})
            kwargs[name] = _build(cls, base, name)
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML (or JSON) file and apply dotted-key overrides such as ``{"attack.steps": 5}``."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[leaf] = value
    return from_dict(raw)


def validate(cfg: RunConfig) -> None:
    if cfg.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg.data.path is not None and not Path(cfg.data.path).is_file():
        raise ConfigurationError(f"dataset file {cfg.data.path} does not exist")
    d = cfg.defense
    if d.epochs < 1 or d.one_step_epochs < 1 or d.iterations < 1:
        raise ConfigurationError("defense epochs and iterations must be >= 1")
    if not 0 < d.bound <= math.pi or not 0 < cfg.eval.bound <= math.pi:
        raise ConfigurationError("rotation bounds must lie in (0, pi]")
    for p in cfg.eval.protocols:
        if p not in ("clean", "random", "attack"):
            raise ConfigurationError(f"unknown protocol {p!r}")


def to_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(dataclasses.asdict(cfg))), sort_keys=True)
