"""Axis rotations, Euler-angle composition and angle-space gradients.

Angles are always ordered ``(phi_x, phi_y, phi_z)`` and composed as
``R = Rz(phi_z) @ Ry(phi_y) @ Rx(phi_x)``.  Point clouds are ``(n, 3)``
arrays (or ``(..., n, 3)`` stacks) and are rotated as ``p -> R p``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from rotadv.errors import InvalidInputError

AXES = ("x", "y", "z")


def _axis_index(axis) -> int:
    if isinstance(axis, (int, np.integer)) and 0 <= int(axis) < 3:
        return int(axis)
    if isinstance(axis, str) and axis.lower() in AXES:
        return AXES.index(axis.lower())
    raise InvalidInputError(f"unknown axis {axis!r}; expected one of x, y, z")


def _finite(value, what):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} must be finite, got {value!r}")
    return arr


def axis_rotation(axis, phi: float) -> np.ndarray:
    """Rotation matrix by ``phi`` radians about a coordinate axis (right-handed)."""
    k = _axis_index(axis)
    phi = float(_finite(phi, "angle"))
    c, s = math.cos(phi), math.sin(phi)
    if k == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if k == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose(angles) -> np.ndarray:
    """Rotation matrix ``Rz @ Ry @ Rx`` for Euler angles ``(phi_x, phi_y, phi_z)``.

    Accepts a single triple or a ``(..., 3)`` stack; the result has shape
    ``(..., 3, 3)``.
    """
    a = _finite(angles, "Euler angles")
    if a.shape[-1:] != (3,):
        raise InvalidInputError(f"Euler angles need a trailing dimension of 3, got shape {a.shape}")
    cx, cy, cz = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sx, sy, sz = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    # closed form of Rz @ Ry @ Rx
    R = np.empty(a.shape[:-1] + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def apply_rotation(R, cloud):
    """Rotate every point of ``cloud`` by ``R``.

    ``cloud`` may be an ``(n, 3)`` array, a ``(..., n, 3)`` stack (with ``R``
    either a single matrix or a matching ``(..., 3, 3)`` stack), or any
    dataclass with a ``points`` field, in which case a copy with rotated
    points is returned and all other fields are kept.
    """
    if dataclasses.is_dataclass(cloud) and hasattr(cloud, "points"):
        return dataclasses.replace(cloud, points=apply_rotation(R, cloud.points))
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim < 2 or pts.shape[-1] != 3 or pts.shape[-2] == 0:
        raise InvalidInputError(f"expected a non-empty (n, 3) point array, got shape {pts.shape}")
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise InvalidInputError(f"rotation must be 3x3, got shape {R.shape}")
    # p_i -> R p_i  ==  P @ R^T
    return pts @ np.swapaxes(R, -1, -2)


def angle_gradients(points, coord_grads) -> np.ndarray:
    """Loss sensitivity to rotating the cloud about the x, y and z axes.

    With ``g`` the loss gradient on coordinates::

        d/dphi_x = sum(-z*g_y + y*g_z)
        d/dphi_y = sum(-x*g_z + z*g_x)
        d/dphi_z = sum(-y*g_x + x*g_y)

    Each component is the derivative of the loss when the *current* cloud is
    rotated about the fixed world axis, i.e. ``L(R_axis(h) p)`` at ``h = 0``.
    Works on ``(n, 3)`` inputs (returning shape ``(3,)``) or stacks.
    """
    p = np.asarray(points, dtype=np.float64)
    g = np.asarray(coord_grads, dtype=np.float64)
    if p.shape != g.shape or p.ndim < 2 or p.shape[-1] != 3 or p.shape[-2] < 1:
        raise InvalidInputError(
            f"points and coordinate gradients must be matching (n, 3) arrays, got {p.shape} and {g.shape}"
        )
    # sum_i p_i x g_i, the torque of the gradient field
    return np.cross(p, g).sum(axis=-2)


def project_angles(angles, bound: float = math.pi) -> np.ndarray:
    """Clamp every angle component into ``[-bound, bound]``."""
    if not 0.0 < bound <= math.pi:
        raise InvalidInputError(f"angle bound must lie in (0, pi], got {bound}")
    return np.clip(np.asarray(angles, dtype=np.float64), -bound, bound)


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    return bool(ortho < tol and np.all(np.abs(np.linalg.det(R) - 1.0) < tol))
