"""Finite-difference checks of the angle gradients used by the attacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rotadv import geometry, nn
from rotadv.attack import sample_rng, random_angles
from rotadv.data import Split


@dataclass(frozen=True)
class GradCheck:
    sample_id: int
    analytic: np.ndarray
    numeric: np.ndarray
    tie: bool

    @property
    def axis_errors(self) -> np.ndarray:
        """Per-axis absolute error scaled by the largest numeric component."""
        scale = max(float(np.abs(self.numeric).max()), 1e-12)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def rel_error(self) -> float:
        return float(self.axis_errors.max())


def _routing(params, pts, label, objective):
    idx = nn.pooled_argmax(params, pts)
    if objective != "cw":
        return idx.tobytes()
    logits = nn.forward(params, pts)
    masked = logits.copy()
    masked[label] = -np.inf
    return idx.tobytes() + bytes([int(np.argmax(masked))])


def check_cloud(params, points, label: int, objective: str = "cw", h: float = 1e-4, sample_id: int = -1) -> GradCheck:
    """Compare analytic angle gradients with central differences.

    The oracle rotates the cloud by +-h about each world axis.  ``tie`` is
    set when max-pool routing (or the runner-up class for the margin
    objective) changes inside that neighbourhood, where the loss is not
    differentiable and the comparison is meaningless.
    """
    pts = np.asarray(points, dtype=np.float64)
    res = nn.backward(params, pts, label, objective)
    analytic = geometry.angle_gradients(pts, res.coord_grads)
    base = _routing(params, pts, label, objective)
    numeric = np.empty(3)
    tie = False
    for k, axis in enumerate(geometry.AXES):
        vals = []
        for sign in (1.0, -1.0):
            q = geometry.apply_rotation(geometry.axis_rotation(axis, sign * h), pts)
            tie = tie or _routing(params, q, label, objective) != base
            vals.append(float(nn.objective_values(params, q, [label], objective)[0]))
        numeric[k] = (vals[0] - vals[1]) / (2 * h)
    return GradCheck(int(sample_id), analytic, numeric, tie)


def check_split(params, split: Split, n: int | None = None, seed: int = 0, objective: str = "cw", h: float = 1e-4, bound: float = np.pi) -> list[GradCheck]:
    """Check ``n`` samples of ``split``, each under its own random rotation."""
    count = len(split) if n is None else min(n, len(split))
    out = []
    for i in range(count):
        cloud = split.cloud(i)
        R = geometry.compose(random_angles(bound, sample_rng(seed, cloud.sample_id)))
        out.append(check_cloud(params, geometry.apply_rotation(R, cloud.points), cloud.label, objective, h, cloud.sample_id))
    return out
