"""Object, background and camera annotation plus error-budget propagation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyInput, FrameMismatch, NegativeError, TooFewPoints
from .geom import RigidTransform, Trajectory, compose_trajectory, invert, quat_to_matrix
from .registration import IcpParams, PointCloud, TriangleMesh, icp, kabsch_fit

MIN_TIP_POINTS = 4
WARN_TIP_POINTS = 10


@dataclass(frozen=True, eq=False)
class TipMeasurementSession:
    marker_poses: list  # RigidTransform marker -> base, one per touch
    tip_offset: np.ndarray  # tip position in the marker frame, m

    def __post_init__(self):
        object.__setattr__(self, "marker_poses", list(self.marker_poses))
        object.__setattr__(self, "tip_offset", np.asarray(self.tip_offset, dtype=float).reshape(3))


@dataclass(frozen=True)
class ObjectAnnotation:
    object_id: str
    mesh_ref: str
    pose: RigidTransform  # mesh frame -> base frame
    correspondence_rmse: float  # m
    icp_rmse: float  # m
    point_count: int
    method: str  # "robot" | "tracker"


def tip_points(session: TipMeasurementSession) -> PointCloud:
    """Tool-tip positions in the base frame, one per marker pose."""
    poses = session.marker_poses
    if len(poses) < MIN_TIP_POINTS:
        raise TooFewPoints(f"need at least {MIN_TIP_POINTS} tip measurements, got {len(poses)}")
    if len(poses) < WARN_TIP_POINTS:
        warnings.warn(f"only {len(poses)} tip measurements; 20 or more are recommended", stacklevel=2)
    base = poses[0].to_frame
    if any(p.to_frame != base for p in poses):
        raise FrameMismatch("tip measurements are expressed in different base frames")
    quats = np.array([p.rotation for p in poses])
    trans = np.array([p.translation for p in poses])
    pts = quat_to_matrix(quats) @ session.tip_offset + trans
    return PointCloud(pts, base)


def annotate_object(
    points: PointCloud,
    mesh: TriangleMesh,
    correspondences: PointCloud,
    params: IcpParams | None = None,
    object_id: str = "object",
    mesh_ref: str = "",
    method: str = "tracker",
) -> ObjectAnnotation:
    """Mesh pose in the base frame from tip points.

    ``correspondences`` lists, in the mesh frame and in the same order as
    ``points``, where each touch landed on the model. They seed a closed-form
    fit, which ICP against the full mesh then refines.
    """
    if correspondences.frame != mesh.frame:
        raise FrameMismatch(f"correspondences are in {correspondences.frame}, mesh is in {mesh.frame}")
    initial = kabsch_fit(correspondences, points)
    corr_rmse = float(np.sqrt(np.mean(np.sum((initial.apply(correspondences.points) - points.points) ** 2, axis=1))))
    reg = icp(points, mesh, invert(initial), params)
    return ObjectAnnotation(
        object_id, mesh_ref, invert(reg.transform), corr_rmse, reg.rmse, len(points), method
    )


def align_background(
    partial_scan: PointCloud,
    background_mesh: TriangleMesh,
    init: RigidTransform,
    params: IcpParams | None = None,
    object_id: str = "background",
    mesh_ref: str = "",
    method: str = "robot",
) -> ObjectAnnotation:
    """Fit a background mesh to a partial scan already expressed in the base frame.

    ``init`` is the mesh->base starting pose.
    """
    if init.from_frame != background_mesh.frame or init.to_frame != partial_scan.frame:
        raise FrameMismatch(
            f"init maps {init.from_frame}->{init.to_frame}, expected {background_mesh.frame}->{partial_scan.frame}"
        )
    reg = icp(partial_scan, background_mesh, invert(init), params)
    return ObjectAnnotation(
        object_id, mesh_ref, invert(reg.transform), math.nan, reg.rmse, len(partial_scan), method
    )


def annotate_camera_trajectory(marker_traj: Trajectory, hand_eye: RigidTransform) -> Trajectory:
    """Camera poses ``marker_i ∘ hand_eye``, relabeled to the camera frame."""
    if hand_eye.to_frame != marker_traj.child_frame:
        raise FrameMismatch(
            f"hand-eye ends in {hand_eye.to_frame}, marker trajectory tracks {marker_traj.child_frame}"
        )
    return compose_trajectory(marker_traj, hand_eye)


def camera_from_board(board_traj: Trajectory, board_in_base: RigidTransform) -> Trajectory:
    """Camera trajectory in the base frame from per-frame board detections.

    ``board_traj`` holds board->camera poses; the result holds camera->base
    poses ``board_in_base ∘ (board->camera)^-1``.
    """
    if board_in_base.from_frame != board_traj.child_frame:
        raise FrameMismatch(f"board pose starts at {board_in_base.from_frame}, detections track {board_traj.child_frame}")
    inv_q = board_traj.quats * np.array([1.0, -1.0, -1.0, -1.0])
    inv_t = -np.einsum("nij,nj->ni", quat_to_matrix(inv_q), board_traj.translations)
    inverted = Trajectory(board_traj.child_frame, board_traj.parent_frame, board_traj.times, inv_q, inv_t)
    ident = RigidTransform.identity(board_traj.parent_frame)
    return compose_trajectory(inverted, ident, left=board_in_base)


# --------------------------------------------------------------------------
# error budget
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorStage:
    """One error source.

    ``dynamic_trans_rmse`` / ``dynamic_rot_rmse`` hold the dynamic-case
    figures for stages whose accuracy degrades with motion (the tracker);
    ``None`` means the stage is the same in both cases.
    """

    name: str
    trans_rmse: float  # m
    rot_rmse: float  # deg
    lever_arm: float = 0.0  # m
    dynamic_trans_rmse: float | None = None
    dynamic_rot_rmse: float | None = None

    def effective(self, dynamic: bool = False) -> float:
        """Translational error with the rotation converted at the lever arm, m."""
        trans, rot = self.trans_rmse, self.rot_rmse
        if dynamic:
            trans = self.trans_rmse if self.dynamic_trans_rmse is None else self.dynamic_trans_rmse
            rot = self.rot_rmse if self.dynamic_rot_rmse is None else self.dynamic_rot_rmse
        return math.hypot(trans, math.radians(rot) * self.lever_arm)

    def scaled(self, factor: float) -> "ErrorStage":
        return replace(
            self,
            trans_rmse=self.trans_rmse * factor,
            rot_rmse=self.rot_rmse * factor,
            dynamic_trans_rmse=None if self.dynamic_trans_rmse is None else self.dynamic_trans_rmse * factor,
            dynamic_rot_rmse=None if self.dynamic_rot_rmse is None else self.dynamic_rot_rmse * factor,
        )


@dataclass(frozen=True)
class ErrorBudget:
    stages: list = field(default_factory=list)
    lower_bound: float = 0.0  # m, static-case total
    upper_bound: float = 0.0  # m, dynamic-case total


def error_budget(stages: Sequence[ErrorStage]) -> ErrorBudget:
    """Root-sum-square propagation of independent stage errors.

    Each stage contributes ``sqrt(trans**2 + (rot_rad * lever_arm)**2)``.
    The lower bound uses every stage's static figures, the upper bound
    substitutes the dynamic figures where a stage has them.
    """
    stages = list(stages)
    if not stages:
        raise EmptyInput("error budget needs at least one stage")
    for s in stages:
        values = [s.trans_rmse, s.rot_rmse, s.lever_arm, s.dynamic_trans_rmse, s.dynamic_rot_rmse]
        if any(v is not None and (not math.isfinite(v) or v < 0) for v in values):
            raise NegativeError(f"stage {s.name!r} has a negative or non-finite error")
    static = math.sqrt(sum(s.effective(False) ** 2 for s in stages))
    dynamic = math.sqrt(sum(s.effective(True) ** 2 for s in stages))
    return ErrorBudget(stages, min(static, dynamic), max(static, dynamic))
