"""Rotations, rigid transforms and oriented-box coordinates.

Rotations are plain ``(3, 3)`` float arrays; axis-angle vectors are ``(3,)``
arrays whose norm is the rotation angle in radians. Boxes are yaw-only:
the heading rotates about +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

SMALL_ANGLE = 1e-8
ORTHO_DRIFT = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(xi) -> np.ndarray:
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    xi = np.asarray(xi, dtype=float).reshape(3)
    if not np.all(np.isfinite(xi)):
        raise InvalidArgument(f"axis-angle vector must be finite, got {xi}")
    angle = math.sqrt(float(xi @ xi))
    if angle < SMALL_ANGLE:
        return np.eye(3) + skew(xi)
    k = skew(xi / angle)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp`; returns the axis-angle vector with norm in [0, pi]."""
    r = np.asarray(r, dtype=float)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    cos_a = 0.5 * (np.trace(r) - 1.0)
    sin_a = 0.5 * float(np.linalg.norm(w))
    angle = math.atan2(sin_a, cos_a)
    if angle < 1e-6:
        return 0.5 * w
    if angle > 0.5 * math.pi:
        # the antisymmetric part loses precision toward pi; use the
        # symmetric part (1 - cos) u u^T instead
        b = 0.5 * (r + r.T) - cos_a * np.eye(3)
        col = int(np.argmax(np.diag(b)))
        axis = b[:, col] / np.linalg.norm(b[:, col])
        if axis @ w < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * sin_a) * w


def rotation_angle(r: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(r)))


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(r: np.ndarray) -> float:
    return math.atan2(r[1, 0], r[0, 0])


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    return math.pi if t == -math.pi else t


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def compose_rotation(r: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Return ``r @ m``, projected back onto SO(3) when round-off has accumulated."""
    out = np.asarray(r, dtype=float) @ np.asarray(m, dtype=float)
    if np.abs(out.T @ out - np.eye(3)).max() > ORTHO_DRIFT:
        out = orthonormalize(out)
    return out


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and bool(np.abs(r.T @ r - np.eye(3)).max() <= tol)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


@dataclass
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_xi(cls, xi, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(xi), np.asarray(translation, dtype=float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self after other``."""
        return RigidTransform(
            compose_rotation(self.rotation, other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def copy(self) -> "RigidTransform":
        return RigidTransform(self.rotation.copy(), self.translation.copy())

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"], dtype=float).reshape(3, 3), d["translation"])


def transform_points(points: np.ndarray, tf: RigidTransform) -> np.ndarray:
    """Apply a rigid transform to an ``(N, 3)`` array, preserving order."""
    return tf.apply(points)


@dataclass
class BoxParams:
    """Yaw-oriented 3D box: centre, size ``(w, l, h)`` along box x/y/z, heading."""

    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.heading = wrap_angle(float(self.heading))
        if not np.all(self.size > 0):
            raise InvalidArgument(f"box size must be positive, got {self.size}")

    @property
    def half(self) -> np.ndarray:
        return 0.5 * self.size

    def as_array(self) -> np.ndarray:
        """``[cx, cy, cz, w, l, h, heading]``."""
        return np.concatenate([self.center, self.size, [self.heading]])

    @classmethod
    def from_array(cls, a) -> "BoxParams":
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:6], float(a[6]))

    def copy(self) -> "BoxParams":
        return BoxParams(self.center.copy(), self.size.copy(), self.heading)

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "heading": float(self.heading),
        }


def box_local_coords(points: np.ndarray, box: BoxParams) -> np.ndarray:
    """Express points (``(3,)`` or ``(N, 3)``) in the box's axis-aligned frame."""
    pts = np.asarray(points, dtype=float)
    q = pts - box.center
    c, s = math.cos(box.heading), math.sin(box.heading)
    out = np.empty_like(q)
    out[..., 0] = c * q[..., 0] + s * q[..., 1]
    out[..., 1] = -s * q[..., 0] + c * q[..., 1]
    out[..., 2] = q[..., 2]
    return out


def box_world_coords(local: np.ndarray, box: BoxParams) -> np.ndarray:
    """Inverse of :func:`box_local_coords`."""
    d = np.asarray(local, dtype=float)
    c, s = math.cos(box.heading), math.sin(box.heading)
    out = np.empty_like(d)
    out[..., 0] = c * d[..., 0] - s * d[..., 1]
    out[..., 1] = s * d[..., 0] + c * d[..., 1]
    out[..., 2] = d[..., 2]
    return out + box.center


def move_about_center(points: np.ndarray, center: np.ndarray, motion: RigidTransform) -> np.ndarray:
    """Rotate points about ``center`` by ``motion.rotation`` then add ``motion.translation``."""
    return (np.asarray(points, dtype=float) - center) @ motion.rotation.T + center + motion.translation
