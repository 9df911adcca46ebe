"""Rigid-transform arithmetic: rotation matrices, SE(3) composition, Kabsch-Umeyama.

Rotations are stored as 3x3 matrices everywhere; axis-angle is a conversion
surface only.  All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, InvalidInputError

ROTATION_TOL = 1e-9
DEGENERACY_TOL = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def is_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if not np.allclose(r @ r.T, np.eye(3), atol=tol, rtol=0.0):
        return False
    return abs(np.linalg.det(r) - 1.0) <= max(tol, 1e-9)


def require_rotation(r: np.ndarray, what: str = "rotation") -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not is_rotation(r, tol=1e-6):
        raise InvalidInputError(f"{what} is not a proper rotation matrix")
    return r


@dataclass(frozen=True)
class AxisAngle:
    """Unit rotation axis plus angle in radians."""

    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", float(self.angle))

    def as_rotvec(self) -> np.ndarray:
        return self.axis * self.angle


@dataclass(frozen=True)
class Transform3:
    """Rigid transform: p_out = rotation @ p_in + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidInputError("Transform3 needs a 3x3 rotation and a 3-vector translation")

    @staticmethod
    def identity() -> "Transform3":
        return Transform3(np.eye(3), np.zeros(3))

    def compose(self, other: "Transform3") -> "Transform3":
        return Transform3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def invert(self) -> "Transform3":
        rt = self.rotation.T
        return Transform3(rt, -rt @ self.translation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (..., 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Transform3":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidInputError("homogeneous matrix must be 4x4")
        return Transform3(m[:3, :3], m[:3, 3])

    def isclose(self, other: "Transform3", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )


def compose(a: Transform3, b: Transform3) -> Transform3:
    return a.compose(b)


def invert(t: Transform3) -> Transform3:
    return t.invert()


def transform_point(t: Transform3, p: np.ndarray) -> np.ndarray:
    """R @ p + t for finite inputs."""
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError("point must be a finite 3-vector")
    return t.apply(p)


def axis_angle_to_rotation(aa: AxisAngle) -> np.ndarray:
    """Rodrigues rotation about a unit axis.

    A zero-norm axis is only legal for zero angle (identity); otherwise the
    requested rotation is undefined.
    """
    axis = np.asarray(aa.axis, dtype=float)
    angle = float(aa.angle)
    if axis.shape != (3,) or not np.all(np.isfinite(axis)) or not np.isfinite(angle):
        raise InvalidInputError("axis-angle entries must be finite")
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        if abs(angle) > 0.0:
            raise InvalidInputError("zero-norm axis with nonzero angle")
        return np.eye(3)
    k = skew(axis / norm)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector (axis * angle), stable near zero."""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise InvalidInputError("rotation vector must be a finite 3-vector")
    theta = np.linalg.norm(v)
    k = skew(v)
    # sin(t)/t and (1-cos(t))/t^2 via sinc to stay exact through t == 0.
    a = np.sinc(theta / np.pi)
    b = 0.5 * np.sinc(theta / (2.0 * np.pi)) ** 2
    return np.eye(3) + a * k + b * (k @ k)


def rotation_to_axis_angle(r: np.ndarray) -> AxisAngle:
    """Inverse Rodrigues map; returned angle lies in [0, pi]."""
    r = np.asarray(r, dtype=float)
    vec = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = 0.5 * np.linalg.norm(vec)
    c = 0.5 * (np.trace(r) - 1.0)
    angle = float(np.arctan2(s, c))
    if s > 1e-7:
        axis = vec / (2.0 * s)
    elif c > 0.0:
        axis = np.array([0.0, 0.0, 1.0])  # no rotation; axis is arbitrary
    else:
        # angle ~ pi: axis is the unit eigenvector of R for eigenvalue +1.
        # Sign is irrelevant at pi since R(a, pi) == R(-a, pi).
        _, _, vt = np.linalg.svd(r - np.eye(3))
        axis = vt[-1]
    return AxisAngle(axis / np.linalg.norm(axis), angle)


def rotation_power(r: np.ndarray, fraction: float) -> np.ndarray:
    """Fractional geodesic rotation: R^fraction via axis-angle scaling."""
    aa = rotation_to_axis_angle(r)
    return rotation_from_rotvec(aa.axis * (aa.angle * fraction))


def kabsch_umeyama(source, target) -> Transform3:
    """Rigid transform (rotation + translation, no scaling) that best maps
    source points onto target points in the least-squares sense.

    Requires >= 3 corresponding pairs spanning 3-D; rank-deficient point sets
    (collinear, or exactly planar whose covariance loses rank) raise
    DegenerateConfigurationError.  The SVD sign-correction branch guarantees a
    proper rotation (det +1) even for reflected or noisy correspondences.
    """
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or tgt.ndim != 2 or tgt.shape[1] != 3:
        raise InvalidInputError("point sets must have shape (n, 3)")
    if src.shape[0] != tgt.shape[0]:
        raise InvalidInputError(
            f"point sets differ in length: {src.shape[0]} vs {tgt.shape[0]}"
        )
    if src.shape[0] < 3:
        raise InvalidInputError("need at least 3 corresponding point pairs")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
        raise InvalidInputError("point sets must be finite")

    src_c = src.mean(axis=0)
    tgt_c = tgt.mean(axis=0)
    cov = (tgt - tgt_c).T @ (src - src_c) / src.shape[0]
    u, sing, vt = np.linalg.svd(cov)
    if sing[-1] < DEGENERACY_TOL:
        raise DegenerateConfigurationError(
            f"centered covariance is rank-deficient (smallest singular value {sing[-1]:.3e})"
        )
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return Transform3(rot, tgt_c - rot @ src_c)
