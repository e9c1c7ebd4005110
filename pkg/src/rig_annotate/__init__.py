"""Calibration, registration, synchronization and rendering for pose-annotated RGB-D datasets."""

from .annotate import (
    ErrorBudget,
    ErrorStage,
    ObjectAnnotation,
    TipMeasurementSession,
    align_background,
    annotate_camera_trajectory,
    annotate_object,
    camera_from_board,
    error_budget,
    tip_points,
)
from .calib import (
    HandEyeObservation,
    HandEyeResult,
    PivotResult,
    handeye_closed_form,
    handeye_trajectory,
    pivot_calibrate,
)
from .errors import FormatError, NoConvergenceWarning, RigAnnotateError
from .geom import (
    RigidTransform,
    TimedPose,
    Trajectory,
    average_transforms,
    compose,
    interpolate_pose,
    invert,
    pose_error,
    resample,
)
from .registration import (
    IcpParams,
    PointCloud,
    RegistrationResult,
    SpatialIndex,
    TriangleMesh,
    build_kdtree,
    closest_point_on_mesh,
    icp,
    kabsch_fit,
)
from .render import DepthMap, IdMap, PinholeCamera, Scene, SceneObject, build_bvh, render_depth, render_instance_mask
from .sync import DistanceCurve, SyncResult, apply_offset, brute_force_offset, distance_curve, estimate_offset_icp

__version__ = "0.1.0"
