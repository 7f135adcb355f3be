"""Clean / Random / Attack evaluation protocols, success rate and loss sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from rotadv import attack, geometry, nn
from rotadv.attack import AttackConfig
from rotadv.config import config_digest
from rotadv.data import Split
from rotadv.errors import InvalidInputError, UndefinedMetricError

REPORT_COLUMNS = ["protocol", "accuracy", "mean_loss", "success_rate", "n_samples", "seed", "config_digest"]


@dataclass(frozen=True)
class Protocol:
    kind: str
    bound: float = math.pi
    attack: AttackConfig | None = None

    def __post_init__(self):
        if self.kind not in ("clean", "random", "attack"):
            raise InvalidInputError(f"unknown protocol {self.kind!r}")
        if self.kind == "attack" and self.attack is None:
            object.__setattr__(self, "attack", AttackConfig(bound=self.bound))

    @classmethod
    def clean(cls):
        return cls("clean")

    @classmethod
    def random(cls, bound: float = math.pi):
        return cls("random", bound)

    @classmethod
    def adversarial(cls, cfg: AttackConfig | None = None):
        cfg = cfg or AttackConfig()
        return cls("attack", cfg.bound, cfg)


@dataclass(frozen=True)
class EvalReport:
    protocol: str
    accuracy: float
    mean_loss: float
    n_samples: int
    seed: int
    config_digest: str
    success_rate: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def row(self) -> list:
        return [
            self.protocol,
            repr(float(self.accuracy)),
            repr(float(self.mean_loss)),
            "" if self.success_rate is None else repr(float(self.success_rate)),
            self.n_samples,
            self.seed,
            self.config_digest,
        ]


def success_rate(correct_before, correct_after) -> float:
    """Fraction of initially correct samples that the attack turns incorrect."""
    before = np.asarray(correct_before, dtype=bool)
    after = np.asarray(correct_after, dtype=bool)
    n = before.sum()
    if n == 0:
        raise UndefinedMetricError("no sample is classified correctly before the attack")
    return float((before & ~after).sum() / n)


def random_rotation_angles(split: Split, bound: float, seed: int) -> np.ndarray:
    """The Random protocol's per-sample angles; identical to the attacks' random starts."""
    return np.stack([attack.random_angles(bound, attack.sample_rng(seed, i)) for i in split.ids])


def best_attack(params, split: Split, cfg: AttackConfig, seed: int = 0, method: str = "axis_wise", workers: int = 1):
    """Run ``cfg.restarts`` attacks per sample and keep the highest final objective."""
    best_a = best_t = None
    for r in range(cfg.restarts):
        a, t = attack.attack_split(params, split, cfg, seed, method, restart=r, workers=workers)
        if best_a is None:
            best_a, best_t = a, t
        else:
            better = t[:, -1] > best_t[:, -1]
            best_a = np.where(better[:, None], a, best_a)
            best_t = np.where(better[:, None], t, best_t)
    return best_a, best_t


def _predict_and_loss(params, points, labels, batch_size=64):
    preds, losses = [], []
    for s in range(0, len(points), batch_size):
        logits = nn.forward(params, points[s : s + batch_size])
        preds.append(np.argmax(logits, axis=1))
        losses.append(nn.cross_entropy(logits, labels[s : s + batch_size]))
    return np.concatenate(preds), np.concatenate(losses)


def evaluate(params, split: Split, protocol: Protocol, seed: int = 0, workers: int = 1) -> EvalReport:
    """Accuracy and mean cross-entropy of ``params`` on ``split`` under ``protocol``.

    The attack protocol is adaptive: it attacks ``params`` itself.
    """
    if len(split) == 0:
        raise InvalidInputError("cannot evaluate on an empty split")
    points = split.points
    rate = None
    if protocol.kind == "random":
        angles = random_rotation_angles(split, protocol.bound, seed)
        points = geometry.apply_rotation(geometry.compose(angles), points)
    elif protocol.kind == "attack":
        angles, _ = best_attack(params, split, protocol.attack, seed, workers=workers)
        points = geometry.apply_rotation(geometry.compose(angles), points)
    preds, losses = _predict_and_loss(params, points, split.labels)
    correct = preds == split.labels
    if protocol.kind == "attack":
        clean_preds, _ = _predict_and_loss(params, split.points, split.labels)
        before = clean_preds == split.labels
        rate = success_rate(before, correct) if before.any() else None
    digest = config_digest(protocol, seed, len(split))
    return EvalReport(protocol.kind, float(correct.mean()), float(losses.mean()), len(split), seed, digest, rate)


def attack_success_rate(params, split: Split, cfg: AttackConfig | None = None, seed: int = 0, method: str = "axis_wise") -> float:
    cfg = cfg or AttackConfig()
    clean_preds, _ = _predict_and_loss(params, split.points, split.labels)
    before = clean_preds == split.labels
    if not before.any():
        raise UndefinedMetricError("no sample is classified correctly before the attack")
    angles, _ = best_attack(params, split, cfg, seed, method)
    preds, _ = _predict_and_loss(params, geometry.apply_rotation(geometry.compose(angles), split.points), split.labels)
    return success_rate(before, preds == split.labels)


@dataclass(frozen=True)
class SweepVariant:
    name: str
    method: str
    cfg: AttackConfig


@dataclass(frozen=True)
class SweepRow:
    variant: str
    step: int
    mean_objective: float
    best_objective: float


def loss_sweep(params, split: Split, variants, seed: int = 0, restarts: int = 1) -> list[SweepRow]:
    """Mean attack objective at every step, per variant.

    ``mean_objective`` averages over samples and restarts; ``best_objective``
    first takes, per sample and step, the maximum over restarts.
    """
    variants = list(variants)
    if not variants:
        raise InvalidInputError("need at least one attack variant")
    rows = []
    for v in variants:
        traces = np.stack([attack.attack_split(params, split, v.cfg, seed, v.method, restart=r)[1] for r in range(restarts)])
        mean = traces.mean(axis=(0, 1))
        best = traces.max(axis=0).mean(axis=0)
        rows.extend(SweepRow(v.name, t, float(mean[t]), float(best[t])) for t in range(traces.shape[2]))
    return rows


def default_variants(cfg: AttackConfig | None = None) -> list[SweepVariant]:
    cfg = cfg or AttackConfig()
    return [
        SweepVariant("random", "random", cfg),
        SweepVariant("standard", "standard", cfg),
        SweepVariant("axis_wise", "axis_wise", cfg),
    ]


def emit_report(reports, path) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in reports:
                w.writerow(r.row())
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def write_sweep_csv(rows, path, config_digest: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "step", "mean_objective", "best_objective"] + (["config_digest"] if config_digest else []))
        for r in rows:
            w.writerow([r.variant, r.step, repr(r.mean_objective), repr(r.best_objective)] + ([config_digest] if config_digest else []))
