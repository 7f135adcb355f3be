"""A small max-pooling point-cloud classifier with a hand-written backward pass.

Layout: shared per-point MLP ``3 -> h1 -> h2``, max-pool over points, then a
global MLP ``h2 -> h3 -> K``.  Hidden layers use softplus.  Because softplus
is strictly increasing, ``max_i softplus(z_i) == softplus(max_i z_i)``, so
pooling is done on pre-activations and only the pooled vector is activated.
The same argmax routes the gradient, which keeps the backward pass sparse:
at most ``h2`` points per cloud receive any gradient.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rotadv.errors import ConfigurationError, FormatError, InvalidInputError

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
OBJECTIVES = ("cross_entropy", "cw")

CHECKPOINT_MAGIC = b"RTADVCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    h1: int = 64
    h2: int = 128
    h3: int = 64
    n_classes: int = 8
    pooling: str = "max"

    def __post_init__(self):
        for name in ("h1", "h2", "h3"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"layer width {name} must be >= 1")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.pooling != "max":
            raise ConfigurationError(f"unsupported pooling {self.pooling!r}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "w1": (3, self.h1),
            "b1": (self.h1,),
            "w2": (self.h1, self.h2),
            "b2": (self.h2,),
            "w3": (self.h2, self.h3),
            "b3": (self.h3,),
            "w4": (self.h3, self.n_classes),
            "b4": (self.n_classes,),
        }


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    arch: Architecture
    seed: int
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_NAMES])

    def replace(self, tensors: dict[str, np.ndarray]) -> "ClassifierParams":
        return dataclasses.replace(self, tensors=tensors)

    def equals(self, other: "ClassifierParams") -> bool:
        """Bit-exact equality of architecture, seed and every weight."""
        return (
            self.arch == other.arch
            and self.seed == other.seed
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_NAMES)
        )


# Unit-sphere coordinates have a per-axis spread of roughly 0.5, so the
# coordinate layer needs a larger gain to leave the near-linear regime.
INPUT_GAIN = 2.0


def init_params(arch: Architecture | None = None, seed: int = 0) -> ClassifierParams:
    """He-uniform weights ``U(-g*sqrt(6/fan_in), g*sqrt(6/fan_in))`` and zero biases.

    ``g`` is :data:`INPUT_GAIN` for the coordinate layer and 1 elsewhere.
    Deterministic in ``(arch, seed)``.
    """
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.startswith("w"):
            gain = INPUT_GAIN if name == "w1" else 1.0
            limit = gain * math.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ClassifierParams(arch=arch, seed=int(seed), tensors=tensors)


def softplus(x: np.ndarray) -> np.ndarray:
    out = np.abs(x)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(x, 0.0)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    # softplus'(x); split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _as_batch(points) -> tuple[np.ndarray, bool]:
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    if p.ndim != 3 or p.shape[-1] != 3 or p.shape[1] == 0:
        raise InvalidInputError(f"expected a non-empty (n, 3) cloud or (B, n, 3) batch, got shape {p.shape}")
    return p, single


@dataclass
class _Cache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    idx: np.ndarray
    m: np.ndarray
    g: np.ndarray
    z3: np.ndarray
    a3: np.ndarray


def _forward(params: ClassifierParams, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    t = params.tensors
    B, n, _ = x.shape
    z1 = x @ t["w1"] + t["b1"]
    a1 = softplus(z1)
    u2 = a1 @ t["w2"]
    idx = np.argmax(u2, axis=1)  # first point wins ties
    m = np.take_along_axis(u2, idx[:, None, :], axis=1)[:, 0, :] + t["b2"]
    g = softplus(m)
    z3 = g @ t["w3"] + t["b3"]
    a3 = softplus(z3)
    logits = a3 @ t["w4"] + t["b4"]
    return logits, _Cache(x, z1, a1, idx, m, g, z3, a3)


def forward(params: ClassifierParams, cloud) -> np.ndarray:
    """Class logits for one ``(n, 3)`` cloud, or ``(B, K)`` logits for a batch."""
    x, single = _as_batch(cloud)
    logits, _ = _forward(params, x)
    return logits[0] if single else logits


def pooled_argmax(params: ClassifierParams, cloud) -> np.ndarray:
    """Index of the point selected by max-pooling, per channel."""
    x, single = _as_batch(cloud)
    _, cache = _forward(params, x)
    return cache.idx[0] if single else cache.idx


def _check_labels(labels, n_classes: int, batch: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim == 0:
        lab = np.full(batch, int(lab))
    if lab.shape != (batch,):
        raise InvalidInputError(f"expected {batch} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise InvalidInputError(f"label out of range [0, {n_classes})")
    return lab.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label) -> float | np.ndarray:
    """Negative log-softmax of the true class (per row for 2-D input)."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    lab = _check_labels(label, z2.shape[1], z2.shape[0])
    out = -_log_softmax(z2)[np.arange(len(lab)), lab]
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out


def _runner_up(z: np.ndarray, lab: np.ndarray) -> np.ndarray:
    masked = z.copy()
    masked[np.arange(len(lab)), lab] = -np.inf
    return np.argmax(masked, axis=1)


def cw_objective(logits, label) -> float | np.ndarray:
    """Untargeted margin ``max_{j != q} Z_j - Z_q``; positive means misclassified."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.shape[1] < 2:
        raise InvalidInputError("margin objective needs at least two classes")
    lab = _check_labels(label, z2.shape[1], z2.shape[0])
    rows = np.arange(len(lab))
    out = z2[rows, _runner_up(z2, lab)] - z2[rows, lab]
    return float(out[0]) if single else out


def objective_and_grad(logits: np.ndarray, labels: np.ndarray, objective: str):
    """Per-row objective values and their gradient w.r.t. the logits."""
    rows = np.arange(len(labels))
    if objective == "cross_entropy":
        logp = _log_softmax(logits)
        values = np.maximum(-logp[rows, labels], 0.0)
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
    elif objective == "cw":
        j = _runner_up(logits, labels)
        values = logits[rows, j] - logits[rows, labels]
        dlogits = np.zeros_like(logits)
        dlogits[rows, j] = 1.0
        dlogits[rows, labels] = -1.0
    else:
        raise InvalidInputError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    return values, dlogits


def objective_values(params: ClassifierParams, cloud, labels, objective: str = "cross_entropy") -> np.ndarray:
    x, _ = _as_batch(cloud)
    lab = _check_labels(labels, params.n_classes, x.shape[0])
    logits, _ = _forward(params, x)
    values, _ = objective_and_grad(logits, lab, objective)
    return values


@dataclass
class BackwardResult:
    loss: float | np.ndarray
    param_grads: dict[str, np.ndarray]
    coord_grads: np.ndarray
    logits: np.ndarray


def backward(params: ClassifierParams, cloud, label, objective: str = "cross_entropy", reduction: str = "sum") -> BackwardResult:
    """Exact reverse-mode gradients of the objective.

    For a batch, ``loss`` holds per-sample values, ``coord_grads[b]`` is the
    gradient of sample ``b``'s own objective, and the parameter gradients are
    of the summed (``reduction="sum"``) or averaged (``"mean"``) objective.
    """
    x, single = _as_batch(cloud)
    t = params.tensors
    B, n, _ = x.shape
    lab = _check_labels(label, params.n_classes, B)
    logits, c = _forward(params, x)
    values, dlogits = objective_and_grad(logits, lab, objective)
    if reduction == "mean":
        dlogits = dlogits / B
    elif reduction != "sum":
        raise InvalidInputError(f"unknown reduction {reduction!r}")

    grads = {}
    grads["w4"] = c.a3.T @ dlogits
    grads["b4"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ t["w4"].T) * sigmoid(c.z3)
    grads["w3"] = c.g.T @ dz3
    grads["b3"] = dz3.sum(axis=0)
    dm = (dz3 @ t["w3"].T) * sigmoid(c.m)  # (B, h2)
    grads["b2"] = dm.sum(axis=0)

    # Only the pooled point of each channel carries gradient.
    a1_sel = np.take_along_axis(c.a1, c.idx[:, :, None], axis=1)  # (B, h2, h1)
    grads["w2"] = np.einsum("bcj,bc->jc", a1_sel, dm)
    z1_sel = np.take_along_axis(c.z1, c.idx[:, :, None], axis=1)
    dz1 = dm[:, :, None] * t["w2"].T[None] * sigmoid(z1_sel)  # (B, h2, h1), one row per routed channel
    x_sel = np.take_along_axis(c.x, c.idx[:, :, None], axis=1)  # (B, h2, 3)
    grads["w1"] = np.einsum("bck,bcj->kj", x_sel, dz1)
    grads["b1"] = dz1.sum(axis=(0, 1))
    dx_sel = dz1 @ t["w1"].T  # (B, h2, 3)

    flat = (np.arange(B)[:, None] * n + c.idx).ravel()
    dx = np.empty((B * n, 3))
    for k in range(3):
        dx[:, k] = np.bincount(flat, weights=dx_sel[:, :, k].ravel(), minlength=B * n)
    dx = dx.reshape(B, n, 3)

    if single:
        return BackwardResult(float(values[0]), grads, dx[0], logits[0])
    return BackwardResult(values, grads, dx, logits)


def sgd_step(params: ClassifierParams, grads: dict[str, np.ndarray], lr: float) -> ClassifierParams:
    """Plain SGD update ``theta - lr * grad``; returns new parameters."""
    if not lr > 0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    new = {}
    for name in PARAM_NAMES:
        g = np.asarray(grads[name])
        if g.shape != params[name].shape:
            raise InvalidInputError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
        new[name] = params[name] - lr * g
    return params.replace(new)


def predict(params: ClassifierParams, points: np.ndarray, batch_size: int = 64) -> np.ndarray:
    x, _ = _as_batch(points)
    out = []
    for s in range(0, len(x), batch_size):
        out.append(np.argmax(_forward(params, x[s : s + batch_size])[0], axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- checkpoints --------------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes   magic "RTADVCKP"
#   u32       format version
#   u32       header length H
#   H bytes   UTF-8 JSON: {"arch": {...}, "seed": int, "params": [[name, shape], ...], "meta": {...}}
#   float64   every tensor in PARAM_NAMES order, C order


def save_checkpoint(params: ClassifierParams, path, meta: dict | None = None) -> None:
    header = {
        "arch": dataclasses.asdict(params.arch),
        "seed": params.seed,
        "params": [[k, list(params[k].shape)] for k in PARAM_NAMES],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for k in PARAM_NAMES:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path, with_meta: bool = False):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
        arch = Architecture(**header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    shapes = arch.shapes()
    offset = 16 + hlen
    tensors = {}
    for k in PARAM_NAMES:
        count = int(np.prod(shapes[k]))
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated at tensor {k}")
        tensors[k] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shapes[k])
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    params = ClassifierParams(arch=arch, seed=int(header["seed"]), tensors=tensors)
    return (params, header.get("meta", {})) if with_meta else params
