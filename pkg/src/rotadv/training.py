"""Minibatch SGD training loop shared by clean, augmented and adversarial training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rotadv import geometry, nn
from rotadv.data import Split
from rotadv.errors import ConfigurationError

# (labels, ids, rng) -> Euler angles of shape (B, 3), or None for no rotation
AngleSampler = Callable[[np.ndarray, np.ndarray, np.random.Generator], "np.ndarray | None"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 0.05
    lr_min: float = 0.0
    schedule: str = "cosine"
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr > 0 or self.lr_min < 0:
            raise ConfigurationError("learning rates must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * epoch / self.epochs))


def fit(
    params: nn.ClassifierParams,
    split: Split,
    cfg: TrainConfig,
    rng: np.random.Generator,
    angle_sampler: AngleSampler | None = None,
) -> nn.ClassifierParams:
    """Cross-entropy minibatch SGD over ``cfg.epochs`` shuffled passes.

    ``angle_sampler`` is called once per minibatch and its Euler angles
    rotate the batch before the step.  With momentum 0 every update is a
    plain :func:`rotadv.nn.sgd_step`; otherwise the heavy-ball velocity is
    passed through the same step.
    """
    velocity = None
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(split))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x = split.points[idx]
            labels = split.labels[idx]
            if angle_sampler is not None:
                angles = angle_sampler(labels, split.ids[idx], rng)
                if angles is not None:
                    x = geometry.apply_rotation(geometry.compose(angles), x)
            grads = nn.backward(params, x, labels, "cross_entropy", reduction="mean").param_grads
            if cfg.momentum > 0:
                if velocity is None:
                    velocity = {k: np.zeros_like(v) for k, v in grads.items()}
                for k in nn.PARAM_NAMES:
                    velocity[k] = cfg.momentum * velocity[k] + grads[k]
                grads = velocity
            params = nn.sgd_step(params, grads, lr)
    return params


def train_clean(params, split, cfg: TrainConfig, seed: int = 0):
    return fit(params, split, cfg, np.random.default_rng(seed))
