"""Two-view pinhole geometry and SO(3) helpers.

Conventions: a :class:`Pose` maps points from the first camera frame into the
second, ``X2 = R @ X1 + t``.  Angles are radians internally; the public
``*_angle_error`` functions report degrees.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateSixD,
    DegenerateTranslation,
    ZeroTranslation,
)

_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``X -> R X + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(self.R) - 1.0) <= tol)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __repr__(self):
        return f"Pose(angle={np.degrees(rotation_angle(self.R, np.eye(3))):.4f}deg, t={self.t.tolist()})"


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(pose: Pose) -> np.ndarray:
    if np.linalg.norm(pose.t) < _EPS:
        raise ZeroTranslation("essential matrix undefined for zero translation")
    return skew(pose.t) @ pose.R


def lift(q) -> np.ndarray:
    """Homogeneous lift (u, v) -> (u, v, 1); works on (2,) or (N, 2)."""
    q = np.asarray(q, dtype=float)
    return np.concatenate([q, np.ones(q.shape[:-1] + (1,))], axis=-1)


def epipolar_residual(E, q1, q2, K1: CameraIntrinsics, K2: CameraIntrinsics):
    """Bilinear epipolar constraint on calibrated rays, unnormalized.

    With ``E = [t]x R`` and ``X2 = R X1 + t`` the constraint vanishes as
    ``x2^T E x1``.  Accepts single points or (N, 2) arrays.
    """
    x1 = lift(q1) @ K1.inverse.T
    x2 = lift(q2) @ K2.inverse.T
    return np.einsum("...i,ij,...j->...", x2, np.asarray(E, dtype=float), x1)


def calibrate(pk, K: CameraIntrinsics) -> np.ndarray:
    pk = np.asarray(pk, dtype=float)
    return np.stack([(pk[..., 0] - K.cx) / K.fx, (pk[..., 1] - K.cy) / K.fy], axis=-1)


def uncalibrate(pc, K: CameraIntrinsics) -> np.ndarray:
    pc = np.asarray(pc, dtype=float)
    return np.stack([pc[..., 0] * K.fx + K.cx, pc[..., 1] * K.fy + K.cy], axis=-1)


def rotation_angle(R, Rgt) -> float:
    """Geodesic angle in radians between two rotations."""
    M = np.asarray(R, dtype=float).T @ np.asarray(Rgt, dtype=float)
    # atan2 keeps full precision near zero, where arccos of the trace bottoms out near 1e-8 rad
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = (np.trace(M) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def rotation_angle_error(R, Rgt) -> float:
    return float(np.degrees(rotation_angle(R, Rgt)))


def translation_angle(t, tgt) -> float:
    t = np.asarray(t, dtype=float)
    tgt = np.asarray(tgt, dtype=float)
    n1, n2 = np.linalg.norm(t), np.linalg.norm(tgt)
    if n1 < _EPS or n2 < _EPS:
        raise DegenerateTranslation(f"translation norm too small ({n1:.3g}, {n2:.3g})")
    return float(np.arctan2(np.linalg.norm(np.cross(t, tgt)), t @ tgt))


def translation_angle_error(t, tgt) -> float:
    return float(np.degrees(translation_angle(t, tgt)))


def gram_schmidt_6d(r) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(6)
    a, b = r[:3], r[3:]
    na = np.linalg.norm(a)
    if na <= _EPS:
        raise DegenerateSixD("first 3-vector has zero norm")
    b1 = a / na
    u = b - (b1 @ b) * b1
    nu = np.linalg.norm(u)
    if nu <= _EPS:
        raise DegenerateSixD("second 3-vector is parallel to the first")
    b2 = u / nu
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def rotation_to_6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def project(points, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    X = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    bad = np.flatnonzero(~(X[:, 2] > 0))
    if bad.size:
        raise BehindCamera(bad)
    return np.stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy], axis=1)


def axis_angle_to_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    A = skew(axis)
    return np.eye(3) + np.sin(angle) * A + (1.0 - np.cos(angle)) * (A @ A)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Random rotation with axis uniform on the sphere and angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    return axis_angle_to_rotation(axis, rng.uniform(0.0, max_angle))


def uniform_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
