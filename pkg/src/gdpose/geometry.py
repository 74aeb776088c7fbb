"""Quaternion and pose algebra.

Quaternions are scalar-first ``(q1, q2, q3, q4)`` and kept in canonical form
with ``q1 >= 0``. Rotations of a pose are stored as the 3-vector logarithm of
the canonical quaternion. All functions accept arrays with arbitrary leading
batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ROTATION_REPRS = ("quaternion", "log_quaternion", "rotation_matrix", "axis_angle")
ROTATION_DIMS = {"quaternion": 4, "log_quaternion": 3, "rotation_matrix": 9, "axis_angle": 3}


class InvalidQuaternionError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """6-DoF pose: translation ``d`` in meters and log-quaternion rotation ``r``."""

    d: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64).reshape(3)
        r = np.asarray(self.r, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(r))):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "r", r)

    @classmethod
    def from_vector(cls, v) -> Pose:
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d, self.r])


class PoseError(NamedTuple):
    translation_error: float  # meters
    rotation_error: float  # degrees


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise InvalidQuaternionError("cannot normalize a zero-norm or non-finite quaternion")
    q = q / norm
    return np.where(q[..., :1] < 0, -q, q)


def quat_log(q) -> np.ndarray:
    """Log map of a unit quaternion; the zero vector when the vector part vanishes.

    Uses ``atan2(|v|, q1)``, equal to ``arccos(q1)`` on the unit sphere but
    accurate near the identity.
    """
    q = np.asarray(q, dtype=np.float64)
    v = q[..., 1:]
    vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = np.arctan2(vnorm, q[..., :1])
    safe = np.where(vnorm == 0, 1.0, vnorm)
    return np.where(vnorm == 0, 0.0, v / safe * angle)


def quat_exp(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta == 0, 1.0, theta)
    vec = np.where(theta == 0, 0.0, np.sin(theta) * r / safe)
    return np.concatenate([np.cos(theta), vec], axis=-1)


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def matrix_to_quat(m) -> np.ndarray:
    """Canonical quaternion of a rotation matrix.

    The input is first projected onto SO(3) by SVD, so regressed (non
    orthogonal) matrices decode to their nearest rotation.
    """
    m = np.asarray(m, dtype=np.float64)
    u, _, vt = np.linalg.svd(m)
    det = np.linalg.det(u @ vt)
    fix = np.ones(m.shape[:-2] + (3,))
    fix[..., 2] = det
    r = (u * fix[..., None, :]) @ vt

    # Shepperd: pivot on the largest of (trace, diagonal) for stability.
    tr = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    cand = np.stack(
        [
            np.stack([1 + tr, r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]], -1),
            np.stack([r[..., 2, 1] - r[..., 1, 2], 1 + 2 * r[..., 0, 0] - tr, r[..., 0, 1] + r[..., 1, 0], r[..., 0, 2] + r[..., 2, 0]], -1),
            np.stack([r[..., 0, 2] - r[..., 2, 0], r[..., 0, 1] + r[..., 1, 0], 1 + 2 * r[..., 1, 1] - tr, r[..., 1, 2] + r[..., 2, 1]], -1),
            np.stack([r[..., 1, 0] - r[..., 0, 1], r[..., 0, 2] + r[..., 2, 0], r[..., 1, 2] + r[..., 2, 1], 1 + 2 * r[..., 2, 2] - tr], -1),
        ],
        axis=-2,
    )
    pivots = np.stack([tr, r[..., 0, 0], r[..., 1, 1], r[..., 2, 2]], axis=-1)
    best = np.argmax(pivots, axis=-1)
    q = np.take_along_axis(cand, best[..., None, None], axis=-2)[..., 0, :]
    return quat_normalize(q)


def rotation_encode(q, representation: str = "log_quaternion") -> np.ndarray:
    q = quat_normalize(q)
    if representation == "quaternion":
        return q
    if representation == "log_quaternion":
        return quat_log(q)
    if representation == "rotation_matrix":
        m = quat_to_matrix(q)
        return m.reshape(m.shape[:-2] + (9,))
    if representation == "axis_angle":
        # so(3) rotation vector: angle times unit axis
        return 2.0 * quat_log(q)
    raise ValueError(f"unknown rotation representation {representation!r}")


def rotation_decode(v, representation: str = "log_quaternion") -> np.ndarray:
    """Inverse of :func:`rotation_encode`; always returns a canonical quaternion."""
    v = np.asarray(v, dtype=np.float64)
    if representation == "quaternion":
        return quat_normalize(v)
    if representation == "log_quaternion":
        return quat_normalize(quat_exp(v))
    if representation == "rotation_matrix":
        return matrix_to_quat(v.reshape(v.shape[:-1] + (3, 3)))
    if representation == "axis_angle":
        return quat_normalize(quat_exp(0.5 * v))
    raise ValueError(f"unknown rotation representation {representation!r}")


def pose_relative(p_i: Pose, p_j: Pose) -> Pose:
    """Componentwise difference ``p_j - p_i`` (not group composition)."""
    return Pose(p_j.d - p_i.d, p_j.r - p_i.r)


def rotation_angle_deg(q_a, q_b) -> np.ndarray:
    dot = np.abs(np.sum(np.asarray(q_a) * np.asarray(q_b), axis=-1))
    return (360.0 / np.pi) * np.arccos(np.clip(dot, 0.0, 1.0))


def pose_error(pred: Pose, target: Pose) -> PoseError:
    t_err = float(np.linalg.norm(pred.d - target.d))
    r_err = float(rotation_angle_deg(quat_exp(pred.r), quat_exp(target.r)))
    return PoseError(t_err, r_err)


def pose_errors(pred_d, pred_q, target_d, target_q) -> tuple[np.ndarray, np.ndarray]:
    """Batched translation (m) and rotation (deg) errors from quaternion rotations."""
    t = np.linalg.norm(np.asarray(pred_d) - np.asarray(target_d), axis=-1)
    r = rotation_angle_deg(quat_normalize(pred_q), quat_normalize(target_q))
    return t, r


def yaw_quaternion(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    z = np.zeros_like(yaw)
    return quat_normalize(np.stack([np.cos(yaw / 2), z, z, np.sin(yaw / 2)], axis=-1))
