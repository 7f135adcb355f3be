"""Synthetic shape datasets, OFF meshes, normalization and dataset files."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rotadv.errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    ParseError,
)

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid", "capsule")

DATASET_MAGIC = b"RTADVDS\x00"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    label: int = -1
    sample_id: int = -1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise InvalidInputError(f"a point cloud needs shape (n>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Split:
    """A batch of equally sized clouds: ``points`` is ``(N, n, 3)``."""

    points: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def cloud(self, i: int) -> PointCloud:
        return PointCloud(self.points[i], int(self.labels[i]), int(self.ids[i]))

    def __iter__(self):
        return (self.cloud(i) for i in range(len(self)))

    def subset(self, index) -> "Split":
        index = np.asarray(index)
        return Split(self.points[index], self.labels[index], self.ids[index])


@dataclass(frozen=True, eq=False)
class Dataset:
    class_names: tuple[str, ...]
    train: Split
    test: Split
    seed: int
    recipe: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def equals(self, other: "Dataset") -> bool:
        def same(a: Split, b: Split):
            return all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("points", "labels", "ids"))

        return (
            self.class_names == other.class_names
            and self.seed == other.seed
            and self.recipe == other.recipe
            and same(self.train, other.train)
            and same(self.test, other.test)
        )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) < 1:
            raise InvalidInputError("a mesh needs at least one face")
        if f.min() < 0 or f.max() >= len(v):
            raise InvalidInputError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# -- normalization -------------------------------------------------------------


def normalize_unit_sphere(cloud):
    """Center on the centroid and scale so the farthest point has norm 1."""
    if isinstance(cloud, PointCloud):
        return PointCloud(normalize_unit_sphere(cloud.points), cloud.label, cloud.sample_id)
    pts = np.asarray(cloud, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if not scale > 0:
        raise DegenerateInputError("cannot normalize a cloud whose points are all identical")
    return centered / scale


# -- OFF meshes ----------------------------------------------------------------


def _off_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def load_off(path) -> TriangleMesh:
    """Parse an OFF file; polygons with more than three vertices are fan-triangulated."""
    lines = _off_lines(Path(path).read_text())
    try:
        lineno, line = next(lines)
    except StopIteration:
        raise ParseError("empty file", line=1) from None
    tokens = line.split()
    if not tokens[0].upper().endswith("OFF"):
        raise ParseError(f"expected OFF header, got {tokens[0]!r}", line=lineno)
    if tokens[0] != "OFF":
        raise ParseError(f"unsupported OFF variant {tokens[0]!r}", line=lineno)
    tokens = tokens[1:]
    if not tokens:  # counts on their own line
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError("missing vertex/face counts", line=lineno + 1) from None
        tokens = line.split()
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
    except (IndexError, ValueError):
        raise ParseError(f"bad count line {line!r}", line=lineno) from None
    if nv < 3 or nf < 1:
        raise ParseError(f"need >= 3 vertices and >= 1 face, got {nv} and {nf}", line=lineno)

    vertices = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"expected {nv} vertices, file ended after {i}", line=lineno + 1) from None
        parts = line.split()
        try:
            vertices[i] = [float(t) for t in parts[:3]]
        except ValueError:
            raise ParseError(f"bad vertex {line!r}", line=lineno) from None
        if len(parts) < 3:
            raise ParseError(f"vertex needs 3 coordinates: {line!r}", line=lineno)

    faces = []
    for i in range(nf):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"expected {nf} faces, file ended after {i}", line=lineno + 1) from None
        try:
            parts = [int(t) for t in line.split()]
        except ValueError:
            raise ParseError(f"bad face {line!r}", line=lineno) from None
        k = parts[0] if parts else 0
        if k < 3 or len(parts) < k + 1:
            raise ParseError(f"face needs >= 3 vertex indices: {line!r}", line=lineno)
        idx = parts[1 : k + 1]
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"vertex index out of range [0, {nv}): {line!r}", line=lineno)
        for j in range(1, k - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(vertices, np.array(faces, dtype=np.int64))


def write_off(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(c)) for c in v) + "\n")
        for face in mesh.faces:
            f.write("3 " + " ".join(str(int(i)) for i in face) + "\n")


def _sample_triangles(tri: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted face choice and uniform barycentric points; ``tri`` is ``(F, 3, 3)``."""
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if not total > 0:
        raise DegenerateInputError("mesh has zero total area")
    face = rng.choice(len(tri), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, face


def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0, return_faces: bool = False):
    """Sample ``n`` points uniformly over the mesh surface, normalized to the unit sphere.

    A single sample cannot be normalized and is returned in mesh coordinates.
    """
    if n < 1:
        raise InvalidInputError("need at least one sample")
    rng = np.random.default_rng(seed)
    pts, face = _sample_triangles(mesh.vertices[mesh.faces], n, rng)
    if n > 1:
        pts = normalize_unit_sphere(pts)
    cloud = PointCloud(pts)
    return (cloud, face) if return_faces else cloud


# -- synthetic primitives ------------------------------------------------------
# Every sampler returns points in a canonical, axis-aligned pose (symmetry
# axis along z) before normalization.


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ellipsoid(n, rng):
    axes = np.array([1.0, rng.uniform(0.55, 0.75), rng.uniform(0.3, 0.45)])
    # rejection on the local area factor keeps the density surface-uniform
    out = []
    gmax = max(axes[0] * axes[1], axes[0] * axes[2], axes[1] * axes[2])
    while sum(len(o) for o in out) < n:
        u = _sphere(2 * n, rng)
        g = np.sqrt(
            (axes[1] * axes[2] * u[:, 0]) ** 2 + (axes[0] * axes[2] * u[:, 1]) ** 2 + (axes[0] * axes[1] * u[:, 2]) ** 2
        )
        keep = rng.random(len(u)) < g / gmax
        out.append(u[keep] * axes)
    return np.concatenate(out)[:n]


def _box_mesh(dx, dy, dz):
    v = np.array([[x, y, z] for x in (-dx, dx) for y in (-dy, dy) for z in (-dz, dz)])
    f = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ]  # fmt: skip
    return v, np.array(f)


def _cube(n, rng):
    v, f = _box_mesh(*(1.0 + rng.uniform(-0.08, 0.08, size=3)))
    return _sample_triangles(v[f], n, rng)[0]


def _pyramid(n, rng):
    h = rng.uniform(1.3, 1.8)
    v = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, h]])
    f = np.array([(0, 2, 1), (0, 3, 2), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)])
    return _sample_triangles(v[f], n, rng)[0]


def _mixture(n, rng, areas, samplers):
    counts = rng.multinomial(n, np.asarray(areas) / np.sum(areas))
    return np.concatenate([s(c) for s, c in zip(samplers, counts)])


def _disk(c, r, z, rng):
    rad = r * np.sqrt(rng.random(c))
    t = rng.uniform(0, 2 * np.pi, c)
    return np.stack([rad * np.cos(t), rad * np.sin(t), np.full(c, z)], axis=1)


def _tube(c, r, z0, z1, rng):
    t = rng.uniform(0, 2 * np.pi, c)
    return np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(z0, z1, c)], axis=1)


def _cylinder(n, rng):
    h = rng.uniform(1.6, 2.4)
    return _mixture(
        n,
        rng,
        [2 * np.pi * h, np.pi, np.pi],
        [lambda c: _tube(c, 1.0, -h / 2, h / 2, rng), lambda c: _disk(c, 1.0, -h / 2, rng), lambda c: _disk(c, 1.0, h / 2, rng)],
    )


def _cone(n, rng):
    h = rng.uniform(1.6, 2.4)
    slant = math.hypot(1.0, h)

    def lateral(c):
        s = np.sqrt(rng.random(c))  # fraction of the way from apex to rim
        t = rng.uniform(0, 2 * np.pi, c)
        return np.stack([s * np.cos(t), s * np.sin(t), h * (1 - s)], axis=1)

    return _mixture(n, rng, [np.pi * slant, np.pi], [lateral, lambda c: _disk(c, 1.0, 0.0, rng)])


def _torus(n, rng):
    r = rng.uniform(0.25, 0.4)
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (1 + r * np.cos(v)) / (1 + r)
        u, v = u[keep], v[keep]
        ring = 1 + r * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


def _capsule(n, rng):
    half = rng.uniform(0.9, 1.4)

    def cap(c, sign):
        p = _sphere(c, rng)
        p[:, 2] = sign * np.abs(p[:, 2]) + sign * half
        return p

    return _mixture(
        n,
        rng,
        [2 * np.pi * 2 * half, 2 * np.pi, 2 * np.pi],
        [lambda c: _tube(c, 1.0, -half, half, rng), lambda c: cap(c, 1.0), lambda c: cap(c, -1.0)],
    )


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "ellipsoid": _ellipsoid,
    "capsule": _capsule,
}


def sample_shape(name: str, n: int, rng: np.random.Generator, jitter: float = 0.01) -> np.ndarray:
    """One normalized, jittered cloud of primitive ``name``."""
    try:
        sampler = _SAMPLERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown shape recipe {name!r}; known: {', '.join(SHAPES)}") from None
    pts = normalize_unit_sphere(sampler(n, rng))
    if jitter > 0:
        pts = normalize_unit_sphere(pts + rng.normal(scale=jitter, size=pts.shape))
    return pts


def gen_synthetic(
    classes=SHAPES,
    per_class: int = 130,
    points_per_cloud: int = 256,
    jitter: float = 0.01,
    seed: int = 0,
    test_per_class: int = 30,
) -> Dataset:
    """Procedural dataset of axis-aligned primitives.

    Each class contributes ``per_class`` clouds, the last ``test_per_class``
    of which go to the test split.  Sample ids are unique across both splits.
    """
    classes = tuple(classes)
    if len(classes) < 2:
        raise ConfigurationError("need at least two classes")
    if per_class < 2 or not 1 <= test_per_class < per_class:
        raise ConfigurationError("per_class must be >= 2 and 1 <= test_per_class < per_class")
    if points_per_cloud < 8:
        raise ConfigurationError("need at least 8 points per cloud")
    if jitter < 0:
        raise ConfigurationError("jitter must be non-negative")
    for name in classes:
        if name not in _SAMPLERS:
            raise ConfigurationError(f"unknown shape recipe {name!r}; known: {', '.join(SHAPES)}")

    n_train = per_class - test_per_class
    splits = {"train": ([], []), "test": ([], [])}
    for k, name in enumerate(classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, k, i])
            which = "train" if i < n_train else "test"
            splits[which][0].append(sample_shape(name, points_per_cloud, rng, jitter))
            splits[which][1].append(k)

    def pack(which, start):
        pts, labels = splits[which]
        return Split(np.stack(pts), np.array(labels, dtype=np.int64), np.arange(start, start + len(labels), dtype=np.int64))

    train = pack("train", 0)
    test = pack("test", len(train))
    recipe = {
        "classes": list(classes),
        "per_class": per_class,
        "test_per_class": test_per_class,
        "points_per_cloud": points_per_cloud,
        "jitter": jitter,
    }
    return Dataset(classes, train, test, int(seed), recipe)


# -- dataset files ---------------------------------------------------------------
#
# Layout (little-endian):
#   8 bytes   magic "RTADVDS\0"
#   u32       format version
#   u32       header length H
#   H bytes   UTF-8 JSON: class_names, seed, recipe, n_points, n_train, n_test
#   then, for train and test in that order:
#     int64[N] sample ids, int64[N] labels, float64[N, n_points, 3] points


def save_dataset(dataset: Dataset, path) -> None:
    n_points = dataset.train.points.shape[1]
    header = {
        "class_names": list(dataset.class_names),
        "seed": dataset.seed,
        "recipe": dataset.recipe,
        "n_points": n_points,
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(blob)))
        f.write(blob)
        for split in (dataset.train, dataset.test):
            f.write(np.ascontiguousarray(split.ids, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(split.labels, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(split.points, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
        n_points = int(header["n_points"])
        counts = (int(header["n_train"]), int(header["n_test"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc

    offset = 16 + hlen
    splits = []
    for count in counts:
        need = count * (16 + 24 * n_points)
        if offset + need > len(data):
            raise FormatError(f"{path}: truncated ({len(data)} bytes, expected more)")
        ids = np.frombuffer(data, "<i8", count, offset).astype(np.int64)
        offset += 8 * count
        labels = np.frombuffer(data, "<i8", count, offset).astype(np.int64)
        offset += 8 * count
        pts = np.frombuffer(data, "<f8", count * n_points * 3, offset).astype(np.float64)
        offset += 24 * count * n_points
        splits.append(Split(pts.reshape(count, n_points, 3), labels, ids))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return Dataset(tuple(header["class_names"]), splits[0], splits[1], int(header["seed"]), header["recipe"])


def export_csv(dataset: Dataset, path) -> None:
    """Flat dump with columns sample_id, class_id, point_index, x, y, z."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "class_id", "point_index", "x", "y", "z"])
        for split in (dataset.train, dataset.test):
            for cloud in split:
                for j, (x, y, z) in enumerate(cloud.points):
                    w.writerow([cloud.sample_id, cloud.label, j, repr(float(x)), repr(float(y)), repr(float(z))])
