"""Rigid-transform algebra, pose error metrics, and seeded pose perturbation.

Poses are camera-to-world transforms: ``rotation`` maps camera-frame vectors
into the world frame and ``translation`` is the camera center in world
coordinates (meters). The wire format everywhere is a flat 12-vector, the
row-major entries of the 3x4 matrix ``[R | t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-9


def _as_array(values, shape, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Pose:
    """A rigid camera-to-world transform (orthonormal rotation + translation)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_array(self.rotation, (3, 3), "rotation")
        trans = _as_array(self.translation, (3,), "translation")
        gram_defect = np.linalg.norm(rot.T @ rot - np.eye(3))
        if gram_defect >= ORTHONORMAL_TOL:
            raise ValueError(
                f"rotation is not orthonormal (||R^T R - I|| = {gram_defect:.3e})"
            )
        if abs(np.linalg.det(rot) - 1.0) >= ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        rot = rot.copy()
        trans = trans.copy()
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix) -> "Pose":
        """Build from a 3x4 (or 4x4 homogeneous) matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (4, 4):
            m = m[:3, :]
        if m.shape != (3, 4):
            raise ValueError(f"expected 3x4 or 4x4 matrix, got {m.shape}")
        return Pose(m[:, :3], m[:, 3])

    @staticmethod
    def from_flat(values) -> "Pose":
        """Build from the flat row-major 12-vector of the 3x4 matrix."""
        flat = _as_array(values, (12,), "flat pose")
        return Pose.from_matrix(flat.reshape(3, 4))

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def flat(self) -> np.ndarray:
        return self.matrix.reshape(12)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from the camera frame into the world frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


@dataclass(frozen=True)
class PerturbationBounds:
    """Per-axis uniform bounds for random pose perturbation.

    ``max_translation`` is in meters per world axis, ``max_rotation`` in
    degrees per camera-frame Euler axis.
    """

    max_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        trans = _as_array(self.max_translation, (3,), "max_translation")
        rot = _as_array(self.max_rotation, (3,), "max_rotation")
        if np.any(trans < 0) or np.any(rot < 0):
            raise ValueError("perturbation bounds must be non-negative")
        trans.setflags(write=False)
        rot.setflags(write=False)
        object.__setattr__(self, "max_translation", trans)
        object.__setattr__(self, "max_rotation", rot)


def rotation_x(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about an arbitrary axis (need not be unit length)."""
    axis = _as_array(axis, (3,), "axis")
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    a = math.radians(degrees)
    return np.eye(3) + math.sin(a) * k + (1.0 - math.cos(a)) * (k @ k)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rot_inv = p.rotation.T
    return Pose(rot_inv, -rot_inv @ p.translation)


def perturb(p: Pose, bounds: PerturbationBounds, seed: int) -> Pose:
    """Randomly jitter a pose within per-axis bounds, deterministically per seed.

    Translation offsets are drawn uniformly per world axis; rotation offsets
    are uniform per-axis Euler angles composed X then Y then Z and applied in
    the camera frame, so the camera center moves by exactly the drawn offset.
    """
    rng = np.random.default_rng(seed)
    dt = rng.uniform(-bounds.max_translation, bounds.max_translation)
    dr = rng.uniform(-bounds.max_rotation, bounds.max_rotation)
    delta_rot = rotation_x(dr[0]) @ rotation_y(dr[1]) @ rotation_z(dr[2])
    if np.all(bounds.max_translation == 0) and np.all(bounds.max_rotation == 0):
        return p
    return Pose(p.rotation @ delta_rot, p.translation + dt)


def translation_error(a: Pose, b: Pose) -> float:
    """Euclidean distance between camera centers, in meters."""
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in degrees."""
    cos_angle = 0.5 * (np.trace(a.rotation.T @ b.rotation) - 1.0)
    cos_angle = min(1.0, max(-1.0, cos_angle))
    return math.degrees(math.acos(cos_angle))


def orthonormalize(raw) -> Pose:
    """Project a raw 12-vector onto the nearest rigid transform.

    The rotation block is replaced by its polar factor (determinant forced
    to +1); the translation is copied verbatim. Raises for rotation blocks
    that are numerically rank-deficient.
    """
    flat = _as_array(raw, (12,), "raw pose")
    m = flat.reshape(3, 4)
    u, s, vt = np.linalg.svd(m[:, :3])
    if s[0] == 0.0 or s[2] < 1e-12 * s[0]:
        raise ValueError("non-recoverable rotation")
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        rot = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return Pose(rot, m[:, 3])


def recenter(poses: list[Pose]) -> tuple[list[Pose], Pose]:
    """Shift a pose set so the centroid of camera centers sits at the origin.

    Returns the shifted poses and the rigid transform that was left-composed
    onto every pose. Pairwise relative poses are unchanged.
    """
    if not poses:
        raise ValueError("cannot recenter an empty pose list")
    centroid = np.mean([p.translation for p in poses], axis=0)
    transform = Pose(np.eye(3), -centroid)
    return [compose(transform, p) for p in poses], transform


def pose_to_line(p: Pose) -> str:
    """Serialize as 12 whitespace-separated decimal values (row-major 3x4)."""
    return " ".join(repr(float(v)) for v in p.flat)


def pose_from_line(line: str) -> Pose:
    parts = line.split()
    if len(parts) != 12:
        raise ValueError(f"expected 12 pose values, got {len(parts)}")
    try:
        values = [float(v) for v in parts]
    except ValueError as exc:
        raise ValueError(f"malformed pose value: {exc}") from exc
    return Pose.from_flat(values)
