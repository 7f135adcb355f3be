"""Rotation pools and the adversarial (min-max) training loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from rotadv import attack, nn
from rotadv.attack import AttackConfig
from rotadv.data import Dataset, Split
from rotadv.errors import ConfigurationError, InvalidInputError, PoolMissError
from rotadv.evaluation import EvalReport, Protocol, evaluate
from rotadv.training import TrainConfig, fit

POOL_COLUMNS = ["class_id", "source_model", "source_sample", "phi_x", "phi_y", "phi_z"]


@dataclass(frozen=True)
class DefenseConfig:
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

    def __post_init__(self):
        if self.epochs < 1 or self.one_step_epochs < 1:
            raise ConfigurationError("retraining epochs must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not 0 < self.bound <= math.pi:
            raise ConfigurationError("rotation bound must lie in (0, pi]")
        self.train_config()  # validates the optimizer fields

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=epochs or self.epochs,
            lr=self.lr,
            lr_min=self.lr_min,
            schedule=self.schedule,
            batch_size=self.batch_size,
            momentum=self.momentum,
        )


@dataclass(frozen=True)
class PoolEntry:
    class_id: int
    angles: tuple[float, float, float]
    source_model: int
    source_sample: int


class RotationPool:
    """Adversarial Euler angles grouped by class."""

    def __init__(self, bound: float = math.pi):
        self.bound = bound
        self._entries: dict[int, list[PoolEntry]] = {}
        self._arrays: dict[int, np.ndarray] = {}

    def add(self, class_id: int, angles, source_model: int = 0, source_sample: int = -1) -> None:
        a = np.asarray(angles, dtype=np.float64)
        if a.shape != (3,) or not np.all(np.isfinite(a)):
            raise InvalidInputError(f"pool angles must be 3 finite values, got {angles!r}")
        if np.any(np.abs(a) > self.bound):
            raise InvalidInputError(f"pool angles {a} exceed the bound {self.bound}")
        self._entries.setdefault(int(class_id), []).append(
            PoolEntry(int(class_id), tuple(float(v) for v in a), int(source_model), int(source_sample))
        )
        self._arrays.pop(int(class_id), None)

    def __len__(self):
        return sum(len(v) for v in self._entries.values())

    def classes(self) -> list[int]:
        return sorted(self._entries)

    def count(self, class_id: int) -> int:
        return len(self._entries.get(int(class_id), ()))

    def entries(self, class_id: int | None = None) -> list[PoolEntry]:
        if class_id is not None:
            return list(self._entries.get(int(class_id), ()))
        return [e for k in self.classes() for e in self._entries[k]]

    def angles(self, class_id: int) -> np.ndarray:
        k = int(class_id)
        if k not in self._arrays:
            if not self._entries.get(k):
                raise PoolMissError(f"rotation pool has no entry for class {k}")
            self._arrays[k] = np.array([e.angles for e in self._entries[k]])
        return self._arrays[k]

    def require_classes(self, class_ids) -> None:
        missing = sorted({int(k) for k in class_ids} - set(self._entries))
        if missing:
            raise PoolMissError(f"rotation pool has no entry for classes {missing}")

    def sample(self, class_id: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw among the stored angles of ``class_id``."""
        arr = self.angles(class_id)
        return arr[rng.integers(len(arr))].copy()

    def sample_many(self, labels, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sample(k, rng) for k in labels])

    def by_sample(self, source_model: int | None = None) -> dict[int, np.ndarray]:
        """Map source sample id to its own adversarial angles (first model if unspecified)."""
        out = {}
        for e in self.entries():
            if source_model is None or e.source_model == source_model:
                out.setdefault(e.source_sample, np.array(e.angles))
        return out

    def to_csv(self, path, config_digest: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(POOL_COLUMNS + (["config_digest"] if config_digest else []))
            for e in self.entries():
                row = [e.class_id, e.source_model, e.source_sample, *(repr(a) for a in e.angles)]
                w.writerow(row + ([config_digest] if config_digest else []))

    @classmethod
    def from_csv(cls, path, bound: float = math.pi) -> "RotationPool":
        pool = cls(bound)
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            missing = set(POOL_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise InvalidInputError(f"{path}: pool file lacks columns {sorted(missing)}")
            for row in reader:
                pool.add(
                    int(row["class_id"]),
                    [float(row["phi_x"]), float(row["phi_y"]), float(row["phi_z"])],
                    int(row["source_model"]),
                    int(row["source_sample"]),
                )
        return pool


def _model_seed(seed: int, model_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(model_index)]).generate_state(1)[0])


def build_pool(models, split: Split, cfg: AttackConfig | None = None, seed: int = 0, workers: int = 1, model_ids=None) -> RotationPool:
    """Attack every training sample with every model and file the angles by class."""
    models = list(models)
    if not models:
        raise ConfigurationError("need at least one model to build a rotation pool")
    cfg = cfg or AttackConfig()
    present = set(np.unique(split.labels).tolist())
    for m in models:
        absent = sorted(set(range(m.n_classes)) - present)
        if absent:
            raise ConfigurationError(f"classes {absent} have no training samples")
    model_ids = list(model_ids) if model_ids is not None else list(range(len(models)))
    pool = RotationPool(cfg.bound)
    for mid, params in zip(model_ids, models):
        records = attack.attack_dataset(params, split, cfg, seed=_model_seed(seed, mid), workers=workers)
        for r in records:
            pool.add(r.class_id, r.angles, mid, r.sample_id)
    return pool


def sample_rotation(pool: RotationPool, class_id: int, rng: np.random.Generator) -> np.ndarray:
    return pool.sample(class_id, rng)


def adversarial_retrain(params, split: Split, pool: RotationPool, cfg: DefenseConfig, rng: np.random.Generator, epochs: int | None = None):
    """Cross-entropy SGD on training samples rotated by class-matched pool draws.

    With ``cfg.use_pool`` off, every sample is always rotated by its own
    adversarial angles instead (the no-pool ablation).  With
    ``cfg.mixed_clean`` on, each sample is left unrotated with probability 1/2.
    """
    pool.require_classes(np.unique(split.labels))
    own = None
    if not cfg.use_pool:
        own = pool.by_sample()
        missing = [int(i) for i in split.ids if int(i) not in own]
        if missing:
            raise PoolMissError(f"no adversarial angles for samples {missing[:5]}")

    def sampler(labels, ids, rng):
        if own is not None:
            angles = np.stack([own[int(i)] for i in ids])
        else:
            angles = pool.sample_many(labels, rng)
        if cfg.mixed_clean:
            angles[rng.random(len(angles)) < 0.5] = 0.0
        return angles

    return fit(params, split, cfg.train_config(epochs), rng, sampler)


def rotation_augment_train(params, split: Split, cfg: TrainConfig, rng: np.random.Generator, bound: float = math.pi):
    """Baseline: every sample gets a fresh uniform random rotation in every epoch."""

    def sampler(labels, ids, rng):
        return rng.uniform(-bound, bound, size=(len(labels), 3))

    return fit(params, split, cfg, rng, sampler)


def iterative_optimize(params, dataset: Dataset, attack_cfg: AttackConfig, cfg: DefenseConfig, seed: int = 0, workers: int = 1):
    """Alternate attack and retraining ``cfg.iterations`` times.

    Each iteration replaces the pool with angles found on the current
    parameters, retrains for ``cfg.epochs`` epochs (continuing from the
    current weights) and evaluates under the Random protocol.
    """
    reports: list[EvalReport] = []
    for t in range(cfg.iterations):
        pool = build_pool([params], dataset.train, attack_cfg, seed=_model_seed(seed, 1000 + t), workers=workers)
        params = adversarial_retrain(params, dataset.train, pool, cfg, np.random.default_rng([seed, t]))
        reports.append(evaluate(params, dataset.test, Protocol.random(cfg.bound), seed=seed))
    return params, reports


def one_step_optimize(target, ensemble, dataset: Dataset, attack_cfg: AttackConfig, cfg: DefenseConfig, seed: int = 0, workers: int = 1, epochs: int | None = None):
    """Build one pool by attacking every ensemble member, then retrain ``target`` once."""
    ensemble = list(ensemble)
    if not ensemble:
        raise ConfigurationError("one-step optimization needs a non-empty ensemble")
    pool = build_pool(ensemble, dataset.train, attack_cfg, seed=_model_seed(seed, 1000), workers=workers)
    rng = np.random.default_rng([seed, 0])
    return adversarial_retrain(target, dataset.train, pool, cfg, rng, epochs=epochs or cfg.one_step_epochs)
