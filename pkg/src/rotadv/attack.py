"""White-box rotation attacks by sign-gradient ascent on Euler angles.

Three attack methods share one batched loop:

``axis_wise``
    each step moves only the axis whose angle gradient has the largest
    magnitude (ties go to x, then y, then z);
``standard``
    each step moves all three angles by the sign of their gradients;
``random``
    a single uniform draw of Euler angles, no ascent.

Every sample gets its own generator seeded from ``(seed, sample_id,
restart)``, so results do not depend on batching or worker count, and the
random attack draws exactly the random start the gradient attacks use.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from rotadv import geometry, nn
from rotadv.data import PointCloud, Split
from rotadv.errors import ConfigurationError, InvalidInputError

METHODS = ("axis_wise", "standard", "random")


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 10
    step_size: float = 0.01
    bound: float = math.pi
    random_start: bool = True
    objective: str = "cw"
    restarts: int = 1
    batch_size: int = 17

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("attack steps must be >= 0")
        if not self.step_size > 0:
            raise ConfigurationError("step size must be positive")
        if not 0 < self.bound <= math.pi:
            raise ConfigurationError("angle bound must lie in (0, pi]")
        if self.objective not in nn.OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.restarts < 1 or self.batch_size < 1:
            raise ConfigurationError("restarts and batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    angles: np.ndarray
    rotation: np.ndarray
    cloud: PointCloud
    trace: np.ndarray

    @property
    def final_objective(self) -> float:
        return float(self.trace[-1])


@dataclass(frozen=True, eq=False)
class AttackRecord:
    sample_id: int
    class_id: int
    angles: np.ndarray
    final_objective: float


def random_angles(bound: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < bound <= math.pi:
        raise InvalidInputError("angle bound must lie in (0, pi]")
    return rng.uniform(-bound, bound, size=3)


def sample_rng(seed: int, sample_id: int, restart: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_id), int(restart)])


def axis_wise_step(angles, angle_grads, step_size: float, bound: float) -> np.ndarray:
    """Move the single most sensitive axis by ``step_size * sign(grad)`` and clamp."""
    angles = np.asarray(angles, dtype=np.float64)
    g = np.asarray(angle_grads, dtype=np.float64)
    axis = np.argmax(np.abs(g), axis=-1)  # first maximum: x before y before z
    chosen = np.take_along_axis(g, np.expand_dims(axis, -1), axis=-1)
    delta = np.zeros_like(angles)
    np.put_along_axis(delta, np.expand_dims(axis, -1), step_size * np.sign(chosen), axis=-1)
    return geometry.project_angles(angles + delta, bound)


def standard_step(angles, angle_grads, step_size: float, bound: float) -> np.ndarray:
    return geometry.project_angles(np.asarray(angles) + step_size * np.sign(angle_grads), bound)


_STEPS = {"axis_wise": axis_wise_step, "standard": standard_step}


def run_attack(params, points, labels, starts, cfg: AttackConfig, method: str = "axis_wise"):
    """Batched attack core.

    ``points`` is ``(B, n, 3)``, ``starts`` the ``(B, 3)`` initial angles.
    Returns final angles ``(B, 3)`` and objective traces ``(B, steps + 1)``
    (one column for the random method).  The original clouds are always
    rotated by the accumulated angles, never the previous iterate.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown attack method {method!r}; expected one of {METHODS}")
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    angles = geometry.project_angles(starts, cfg.bound)
    if method == "random":
        x = geometry.apply_rotation(geometry.compose(angles), points)
        return angles, nn.objective_values(params, x, labels, cfg.objective)[:, None]

    update = _STEPS[method]
    trace = np.empty((len(points), cfg.steps + 1))
    for t in range(cfg.steps):
        x = geometry.apply_rotation(geometry.compose(angles), points)
        res = nn.backward(params, x, labels, cfg.objective)
        trace[:, t] = res.loss
        # Sensitivity to rotating the current cloud about each world axis;
        # equals d/dphi exactly for the outermost (z) factor of Rz Ry Rx.
        grads = geometry.angle_gradients(x, res.coord_grads)
        angles = update(angles, grads, cfg.step_size, cfg.bound)
    x = geometry.apply_rotation(geometry.compose(angles), points)
    trace[:, cfg.steps] = nn.objective_values(params, x, labels, cfg.objective)
    return angles, trace


def _start(cfg: AttackConfig, rng, force_random: bool = False) -> np.ndarray:
    if cfg.random_start or force_random:
        return random_angles(cfg.bound, rng)
    return np.zeros(3)


def _single(params, cloud, label, cfg, rng, method) -> AttackOutcome:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidInputError(f"expected a non-empty (n, 3) cloud, got shape {pts.shape}")
    lab = nn._check_labels(label, params.n_classes, 1)
    start = _start(cfg, rng, force_random=method == "random")
    angles, trace = run_attack(params, pts[None], lab, start[None], cfg, method)
    R = geometry.compose(angles[0])
    out_label = cloud.label if isinstance(cloud, PointCloud) else int(lab[0])
    out_id = cloud.sample_id if isinstance(cloud, PointCloud) else -1
    return AttackOutcome(angles[0], R, PointCloud(geometry.apply_rotation(R, pts), out_label, out_id), trace[0])


def axis_wise_attack(params, cloud, label, cfg: AttackConfig | None = None, rng=None) -> AttackOutcome:
    """Rotation attack that updates one axis per step (the default attack)."""
    return _single(params, cloud, label, cfg or AttackConfig(), rng or np.random.default_rng(), "axis_wise")


def standard_attack(params, cloud, label, cfg: AttackConfig | None = None, rng=None) -> AttackOutcome:
    return _single(params, cloud, label, cfg or AttackConfig(), rng or np.random.default_rng(), "standard")


def random_rotation_attack(params, cloud, label, bound: float = math.pi, rng=None, objective: str = "cw") -> AttackOutcome:
    cfg = AttackConfig(steps=0, bound=bound, objective=objective)
    return _single(params, cloud, label, cfg, rng or np.random.default_rng(), "random")


def _attack_chunk(args):
    params, points, labels, ids, cfg, seed, method, restart = args
    force = method == "random"
    starts = np.stack([_start(cfg, sample_rng(seed, i, restart), force) for i in ids])
    out_a, out_t = [], []
    for s in range(0, len(ids), cfg.batch_size):
        sl = slice(s, s + cfg.batch_size)
        a, t = run_attack(params, points[sl], labels[sl], starts[sl], cfg, method)
        out_a.append(a)
        out_t.append(t)
    return np.concatenate(out_a), np.concatenate(out_t)


def attack_split(params, split: Split, cfg: AttackConfig, seed: int = 0, method: str = "axis_wise", restart: int = 0, workers: int = 1):
    """Attack every sample of ``split``; returns ``(angles (N, 3), traces (N, T+1))``."""
    if len(split) == 0:
        raise InvalidInputError("cannot attack an empty split")
    if method not in METHODS:
        raise InvalidInputError(f"unknown attack method {method!r}")
    if workers <= 1:
        return _attack_chunk((params, split.points, split.labels, split.ids, cfg, seed, method, restart))
    bounds = np.linspace(0, len(split), workers + 1).astype(int)
    jobs = [
        (params, split.points[a:b], split.labels[a:b], split.ids[a:b], cfg, seed, method, restart)
        for a, b in zip(bounds[:-1], bounds[1:])
        if b > a
    ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_attack_chunk, jobs))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def attack_dataset(params, split: Split, cfg: AttackConfig | None = None, seed: int = 0, method: str = "axis_wise", workers: int = 1) -> list[AttackRecord]:
    """One adversarial rotation per sample, ordered by sample id."""
    cfg = cfg or AttackConfig()
    angles, traces = attack_split(params, split, cfg, seed, method, workers=workers)
    records = [
        AttackRecord(int(i), int(c), a, float(t[-1])) for i, c, a, t in zip(split.ids, split.labels, angles, traces)
    ]
    return sorted(records, key=lambda r: r.sample_id)


RECORD_COLUMNS = ["sample_id", "class_id", "phi_x", "phi_y", "phi_z", "final_objective"]


def write_records_csv(records, path, config_digest: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_COLUMNS + (["config_digest"] if config_digest else []))
        for r in records:
            row = [r.sample_id, r.class_id, *(repr(float(a)) for a in r.angles), repr(float(r.final_objective))]
            w.writerow(row + ([config_digest] if config_digest else []))


def read_records_csv(path) -> list[AttackRecord]:
    with open(path, newline="") as f:
        return [
            AttackRecord(
                int(row["sample_id"]),
                int(row["class_id"]),
                np.array([float(row["phi_x"]), float(row["phi_y"]), float(row["phi_z"])]),
                float(row["final_objective"]),
            )
            for row in csv.DictReader(f)
        ]
