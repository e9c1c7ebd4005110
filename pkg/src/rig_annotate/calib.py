"""Tool-tip pivot calibration and the two hand-eye calibration routes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateMotion, EmptyInput, FrameMismatch, TimestampMismatch, TooFewPoses
from .geom import (
    RigidTransform,
    Trajectory,
    average_transforms,
    compose,
    invert,
    pose_error,
    quat_angle,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    resample,
)

PIVOT_MAX_CONDITION = 1e8


@dataclass(frozen=True, eq=False)
class PivotResult:
    tip_offset: np.ndarray  # in the marker frame, m
    pivot_point: np.ndarray  # in the base frame, m
    rmse: float
    condition_number: float = float("nan")


def pivot_calibrate(marker_poses: Sequence[RigidTransform]) -> PivotResult:
    """Solve ``R_i tip - pivot = -t_i`` for the tip offset and pivot point.

    The 3N x 6 system is solved with a QR factorization. Sessions whose
    rotations do not span two independent axes leave the system rank
    deficient and are rejected through the condition number.
    """
    poses = list(marker_poses)
    if len(poses) < 3:
        raise TooFewPoses(f"pivot calibration needs at least 3 poses, got {len(poses)}")
    frames = (poses[0].from_frame, poses[0].to_frame)
    if any((p.from_frame, p.to_frame) != frames for p in poses):
        raise FrameMismatch("pivot poses must all share the same frames")

    rots = quat_to_matrix(np.array([p.rotation for p in poses]))
    trans = np.array([p.translation for p in poses])
    a = np.zeros((3 * len(poses), 6))
    a[:, :3] = rots.reshape(-1, 3)
    a[:, 3:] = np.tile(-np.eye(3), (len(poses), 1))
    b = -trans.reshape(-1)

    sv = np.linalg.svd(a, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if cond > PIVOT_MAX_CONDITION:
        raise DegenerateMotion(
            f"pivot motion is degenerate (condition number {cond:.3g}); rotate about two or more axes"
        )
    q, r = np.linalg.qr(a)
    x = solve_triangular(r, q.T @ b)
    tip, pivot = x[:3], x[3:]
    resid = rots @ tip + trans - pivot
    rmse = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return PivotResult(tip, pivot, rmse, cond)


# --------------------------------------------------------------------------
# hand-eye
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HandEyeObservation:
    """One calibration frame.

    ``base_to_hand`` is the pose of the hand (robot EE or tracker body) in
    the base frame; ``hand_eye_chain`` is the camera pose in the same base
    frame obtained through the board.
    """

    base_to_hand: RigidTransform
    hand_eye_chain: RigidTransform

    @classmethod
    def from_board(
        cls, base_to_hand: RigidTransform, board_in_base: RigidTransform, board_in_camera: RigidTransform
    ) -> "HandEyeObservation":
        """Build the chain ``board->base ∘ camera->board`` from a board detection."""
        return cls(base_to_hand, compose(board_in_base, invert(board_in_camera)))


@dataclass(frozen=True)
class HandEyeResult:
    x: RigidTransform  # camera frame -> hand frame
    trans_residual_rmse: float  # m
    rot_residual_rmse: float  # deg
    per_frame_errors: list = field(default_factory=list)  # (m, deg) per frame


def _rmse(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(values**2))) if len(values) else 0.0


def handeye_closed_form(observations: Sequence[HandEyeObservation]) -> HandEyeResult:
    """Per-frame chain composition followed by rotation-robust averaging."""
    obs = list(observations)
    if not obs:
        raise EmptyInput("hand-eye calibration needs at least one observation")
    estimates = []
    for i, o in enumerate(obs):
        if o.hand_eye_chain.to_frame != o.base_to_hand.to_frame:
            raise FrameMismatch(
                f"observation {i}: chain ends in {o.hand_eye_chain.to_frame}, "
                f"hand pose is expressed in {o.base_to_hand.to_frame}"
            )
        estimates.append(compose(invert(o.base_to_hand), o.hand_eye_chain))
    x = average_transforms(estimates)
    errors = [pose_error(e, x) for e in estimates]
    return HandEyeResult(
        x, _rmse([e[0] for e in errors]), _rmse([e[1] for e in errors]), errors
    )


def _common_samples(camera_traj: Trajectory, marker_traj: Trajectory, resample_marker: bool):
    if camera_traj.parent_frame != marker_traj.parent_frame:
        raise FrameMismatch(
            f"camera trajectory is in {camera_traj.parent_frame}, marker trajectory in {marker_traj.parent_frame}"
        )
    if len(camera_traj) < 2 or len(marker_traj) < 2:
        raise TooFewPoses("trajectory hand-eye calibration needs at least 2 samples per stream")
    if len(camera_traj) == len(marker_traj) and np.array_equal(camera_traj.times, marker_traj.times):
        return camera_traj, marker_traj
    if not resample_marker:
        raise TimestampMismatch("camera and marker trajectories are not sampled at common timestamps")
    lo, hi = marker_traj.times[0], marker_traj.times[-1]
    keep = (camera_traj.times >= lo) & (camera_traj.times <= hi)
    if keep.sum() < 2:
        raise TimestampMismatch("fewer than 2 camera timestamps fall inside the marker trajectory span")
    cam = Trajectory(
        camera_traj.parent_frame,
        camera_traj.child_frame,
        camera_traj.times[keep],
        camera_traj.quats[keep],
        camera_traj.translations[keep],
    )
    return cam, resample(marker_traj, cam.times)


def per_sample_handeye(camera_traj: Trajectory, marker_traj: Trajectory):
    """Per-sample ``marker_i^-1 ∘ camera_i`` as ``(quats, translations)`` arrays."""
    q_inv = quat_conjugate(marker_traj.quats)
    quats = quat_multiply(q_inv, camera_traj.quats)
    r_inv = quat_to_matrix(q_inv)
    trans = np.einsum("nij,nj->ni", r_inv, camera_traj.translations - marker_traj.translations)
    return quats, trans


def alignment_residuals(x: RigidTransform, camera_traj: Trajectory, marker_traj: Trajectory):
    """Per-sample (m, deg) errors between ``marker_i ∘ x`` and ``camera_i``."""
    pred_q = quat_multiply(marker_traj.quats, x.rotation)
    pred_t = marker_traj.translations + quat_to_matrix(marker_traj.quats) @ x.translation
    trans = np.linalg.norm(pred_t - camera_traj.translations, axis=1)
    rel = quat_multiply(pred_q, quat_conjugate(camera_traj.quats))
    return trans, np.degrees(quat_angle(rel))


def handeye_trajectory(camera_traj: Trajectory, marker_traj: Trajectory, resample_marker: bool = True) -> HandEyeResult:
    """Hand-eye offset from aligning a camera trajectory with a marker trajectory.

    Both trajectories must be expressed in the same base frame. Camera
    timestamps are the master clock: if the streams are not sampled at
    identical times, marker poses are interpolated onto the camera times
    that fall inside the marker span (unless ``resample_marker`` is False,
    which raises :class:`TimestampMismatch` instead).
    """
    cam, marker = _common_samples(camera_traj, marker_traj, resample_marker)
    quats, trans = per_sample_handeye(cam, marker)
    estimates = [
        RigidTransform(q, t, cam.child_frame, marker.child_frame) for q, t in zip(quats, trans)
    ]
    x = average_transforms(estimates)
    t_err, r_err = alignment_residuals(x, cam, marker)
    return HandEyeResult(x, _rmse(t_err), _rmse(r_err), list(zip(t_err.tolist(), r_err.tolist())))
