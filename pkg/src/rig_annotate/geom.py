"""Frame-labeled rigid transforms and trajectories.

Conventions
-----------
* Quaternions are Hamilton, scalar-first ``(w, x, y, z)``, active rotations,
  canonicalized so that ``w >= 0``.
* A :class:`RigidTransform` with ``from_frame="A"`` and ``to_frame="B"`` maps
  point coordinates expressed in ``A`` into ``B``: ``p_B = R p_A + t``. It is
  therefore also the pose of frame ``A`` seen from ``B``.
* Lengths are meters, times seconds, angles radians unless a name says
  otherwise (``*_deg``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, FrameMismatch, InvalidGeometry, OutOfRange, TooFewPoses

FrameId = str

_IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


# --------------------------------------------------------------------------
# quaternion helpers (arrays, last axis of length 4)
# --------------------------------------------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Unit-normalize and flip sign so the scalar part is non-negative.

    Quaternions already unit to within a few ulp are left as they are, so
    canonicalizing is idempotent and stored values read back unchanged.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(np.abs(norm - 1.0) <= 4e-16, q, q / norm)
    w = q[..., :1]
    sign = np.where(w < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Convert a single 3x3 rotation matrix to a canonical quaternion."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    # Shepperd: pivot on the largest of (w, x, y, z) magnitudes.
    if tr > 0.0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return canonicalize_quat(np.array(q))


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return _IDENTITY_Q.copy()
    half = 0.5 * angle
    return canonicalize_quat(np.concatenate([[math.cos(half)], math.sin(half) * axis / n]))


def quat_from_rotvec(rotvec: Sequence[float]) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle == 0.0:
        return _IDENTITY_Q.copy()
    return quat_from_axis_angle(rotvec / angle, angle)


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in radians, in [0, pi]; accurate for tiny angles."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def slerp(q0: np.ndarray, q1: np.ndarray, alpha) -> np.ndarray:
    """Shortest-arc spherical interpolation; broadcasts over leading axes."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.clip(np.abs(dot), -1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    small = sin_theta < 1e-9
    safe = np.where(small, 1.0, sin_theta)
    w0 = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * theta) / safe)
    w1 = np.where(small, alpha, np.sin(alpha * theta) / safe)
    return canonicalize_quat(w0 * q0 + w1 * q1)


def _check_frame(name) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidGeometry(f"frame id must be a non-empty string, got {name!r}")
    return name


# --------------------------------------------------------------------------
# RigidTransform
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element carrying its source and destination frame labels."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: FrameId
    to_frame: FrameId

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidGeometry("transform contains non-finite values")
        norm = np.linalg.norm(q)
        if norm < 1e-6:
            raise InvalidGeometry("rotation quaternion has (near) zero norm")
        q = canonicalize_quat(q)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "from_frame", _check_frame(self.from_frame))
        object.__setattr__(self, "to_frame", _check_frame(self.to_frame))

    @classmethod
    def identity(cls, from_frame: FrameId, to_frame: FrameId | None = None) -> "RigidTransform":
        return cls(_IDENTITY_Q, np.zeros(3), from_frame, to_frame or from_frame)

    @classmethod
    def from_matrix(cls, matrix, from_frame: FrameId, to_frame: FrameId) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        rot = matrix[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-6 or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise InvalidGeometry("matrix rotation block is not a proper rotation")
        return cls(matrix_to_quat(rot), matrix[:3, 3], from_frame, to_frame)

    @classmethod
    def from_axis_angle(
        cls,
        axis: Sequence[float],
        angle: float,
        translation: Sequence[float] = (0.0, 0.0, 0.0),
        from_frame: FrameId = "A",
        to_frame: FrameId = "B",
    ) -> "RigidTransform":
        return cls(quat_from_axis_angle(axis, angle), translation, from_frame, to_frame)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> np.ndarray:
        """Map points (shape ``(3,)`` or ``(N, 3)``) from ``from_frame`` into ``to_frame``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix.T + self.translation

    def relabel(self, from_frame: FrameId | None = None, to_frame: FrameId | None = None) -> "RigidTransform":
        return RigidTransform(
            self.rotation, self.translation, from_frame or self.from_frame, to_frame or self.to_frame
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform({self.from_frame}->{self.to_frame}, q=[{q}], t=[{t}])"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Chain ``b`` (A->B) followed by ``a`` (B->C) into A->C."""
    if a.from_frame != b.to_frame:
        raise FrameMismatch(
            f"cannot compose {a.from_frame}->{a.to_frame} after {b.from_frame}->{b.to_frame}"
        )
    q = quat_multiply(a.rotation, b.rotation)
    t = a.rotation_matrix @ b.translation + a.translation
    return RigidTransform(q, t, b.from_frame, a.to_frame)


def invert(t: RigidTransform) -> RigidTransform:
    q_inv = quat_conjugate(t.rotation)
    return RigidTransform(q_inv, -(quat_to_matrix(q_inv) @ t.translation), t.to_frame, t.from_frame)


def pose_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Translation distance (m) and geodesic rotation angle (deg) between two poses."""
    if (a.from_frame, a.to_frame) != (b.from_frame, b.to_frame):
        raise FrameMismatch(
            f"pose_error needs matching frames, got {a.from_frame}->{a.to_frame} "
            f"and {b.from_frame}->{b.to_frame}"
        )
    trans = float(np.linalg.norm(a.translation - b.translation))
    if np.array_equal(a.rotation, b.rotation):
        return trans, 0.0
    rel = quat_multiply(a.rotation, quat_conjugate(b.rotation))
    return trans, math.degrees(float(quat_angle(rel)))


def average_quaternions(quats: np.ndarray) -> np.ndarray:
    """Sign-invariant mean: principal eigenvector of the summed outer products."""
    quats = np.asarray(quats, dtype=float)
    _, vecs = np.linalg.eigh(quats.T @ quats)
    return canonicalize_quat(vecs[:, -1])


def average_transforms(ts: Sequence[RigidTransform]) -> RigidTransform:
    ts = list(ts)
    if not ts:
        raise EmptyInput("average_transforms needs at least one transform")
    frames = (ts[0].from_frame, ts[0].to_frame)
    for t in ts[1:]:
        if (t.from_frame, t.to_frame) != frames:
            raise FrameMismatch(f"cannot average {t.from_frame}->{t.to_frame} with {frames[0]}->{frames[1]}")
    if len(ts) == 1:
        return ts[0]
    quats = np.array([t.rotation for t in ts])
    trans = np.mean([t.translation for t in ts], axis=0)
    return RigidTransform(average_quaternions(quats), trans, *frames)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimedPose:
    t: float
    pose: RigidTransform


class Trajectory:
    """Time-stamped poses of ``child_frame`` expressed in ``parent_frame``.

    Samples are stored column-wise (``times``, ``quats``, ``translations``);
    :attr:`samples` materializes the :class:`TimedPose` view.
    """

    __slots__ = ("parent_frame", "child_frame", "times", "quats", "translations")

    def __init__(self, parent_frame: FrameId, child_frame: FrameId, times, quats, translations):
        times = np.array(times, dtype=float).reshape(-1)
        quats = np.array(quats, dtype=float).reshape(-1, 4)
        translations = np.array(translations, dtype=float).reshape(-1, 3)
        if not (len(times) == len(quats) == len(translations)):
            raise InvalidGeometry("trajectory columns have different lengths")
        if not np.all(np.isfinite(times)):
            raise InvalidGeometry("trajectory timestamps must be finite")
        if len(times) > 1 and np.any(np.diff(times) <= 0.0):
            raise InvalidGeometry("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(quats)) and np.all(np.isfinite(translations))):
            raise InvalidGeometry("trajectory poses contain non-finite values")
        if len(quats) and np.any(np.linalg.norm(quats, axis=1) < 1e-6):
            raise InvalidGeometry("trajectory contains a zero quaternion")
        quats = canonicalize_quat(quats) if len(quats) else quats
        for arr in (times, quats, translations):
            arr.flags.writeable = False
        self.parent_frame = _check_frame(parent_frame)
        self.child_frame = _check_frame(child_frame)
        self.times = times
        self.quats = quats
        self.translations = translations

    @classmethod
    def from_samples(
        cls, parent_frame: FrameId, child_frame: FrameId, samples: Iterable[TimedPose]
    ) -> "Trajectory":
        samples = list(samples)
        for s in samples:
            if (s.pose.from_frame, s.pose.to_frame) != (child_frame, parent_frame):
                raise FrameMismatch(
                    f"sample at t={s.t} is {s.pose.from_frame}->{s.pose.to_frame}, "
                    f"trajectory expects {child_frame}->{parent_frame}"
                )
        return cls(
            parent_frame,
            child_frame,
            [s.t for s in samples],
            np.array([s.pose.rotation for s in samples]).reshape(-1, 4),
            np.array([s.pose.translation for s in samples]).reshape(-1, 3),
        )

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform(self.quats[i], self.translations[i], self.child_frame, self.parent_frame)

    @property
    def samples(self) -> list[TimedPose]:
        return [TimedPose(float(self.times[i]), self.pose(i)) for i in range(len(self))]

    def with_times(self, times) -> "Trajectory":
        return Trajectory(self.parent_frame, self.child_frame, times, self.quats, self.translations)

    def __repr__(self) -> str:
        span = f"[{self.times[0]:.3f}, {self.times[-1]:.3f}] s" if len(self) else "empty"
        return f"Trajectory({self.child_frame}->{self.parent_frame}, n={len(self)}, {span})"


def resample(traj: Trajectory, times) -> Trajectory:
    """Evaluate ``traj`` at ``times`` (lerp translation, slerp rotation).

    Query times that coincide with a sample return that sample exactly.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(traj) < 2:
        raise TooFewPoses("interpolation needs at least two samples")
    lo, hi = traj.times[0], traj.times[-1]
    if np.any(times < lo) or np.any(times > hi):
        raise OutOfRange(f"query time outside trajectory span [{lo}, {hi}]")
    idx = np.searchsorted(traj.times, times, side="right") - 1
    idx = np.clip(idx, 0, len(traj) - 2)
    t0 = traj.times[idx]
    t1 = traj.times[idx + 1]
    alpha = (times - t0) / (t1 - t0)
    quats = slerp(traj.quats[idx], traj.quats[idx + 1], alpha)
    trans = traj.translations[idx] + alpha[:, None] * (traj.translations[idx + 1] - traj.translations[idx])
    exact_lo = alpha == 0.0
    exact_hi = alpha == 1.0
    quats[exact_lo] = traj.quats[idx[exact_lo]]
    trans[exact_lo] = traj.translations[idx[exact_lo]]
    quats[exact_hi] = traj.quats[idx[exact_hi] + 1]
    trans[exact_hi] = traj.translations[idx[exact_hi] + 1]
    return Trajectory(traj.parent_frame, traj.child_frame, times, quats, trans)


def interpolate_pose(traj: Trajectory, t: float) -> RigidTransform:
    return resample(traj, [t]).pose(0)


def compose_trajectory(traj: Trajectory, right: RigidTransform, left: RigidTransform | None = None) -> Trajectory:
    """Apply ``left ∘ pose_i ∘ right`` to every sample, relabeling frames."""
    if right.to_frame != traj.child_frame:
        raise FrameMismatch(f"cannot right-compose {right.from_frame}->{right.to_frame} onto {traj.child_frame}")
    quats = quat_multiply(traj.quats, right.rotation)
    trans = traj.translations + quat_to_matrix(traj.quats) @ right.translation
    parent = traj.parent_frame
    if left is not None:
        if left.from_frame != traj.parent_frame:
            raise FrameMismatch(f"cannot left-compose {left.from_frame}->{left.to_frame} onto {traj.parent_frame}")
        quats = quat_multiply(left.rotation, quats)
        trans = trans @ left.rotation_matrix.T + left.translation
        parent = left.to_frame
    return Trajectory(parent, right.from_frame, traj.times, quats, trans)
