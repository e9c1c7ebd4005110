"""Session directories and the end-to-end annotation pipeline.

A session directory holds everything one acquisition produces::

    config.json                      SessionConfig used to simulate it
    meshes/<object_id>.ply           object and background meshes
    observations/
        pivot_poses.json             tool poses pivoting about a fixed point
        board_points.json            touch targets in the board frame
        board_touches.json           tool poses touching the board targets
        tips/<object_id>.json        tool poses touching the object surface
        tips/<object_id>_correspondences.json   touched points, mesh frame
        background_scan.json         partial background scan, base frame
        background_init.json         starting pose for background alignment
        marker_trajectory.json       hand (robot EE or tracker body) poses
        board_detections.json        board -> camera poses per camera frame
    truth/
        scene.json                   object poses (mesh -> base)
        tip.json                     tip offset and pivot point
        hand_eye.json                camera -> hand
        board_pose.json              board -> base
        camera_trajectory.json       camera -> base at the hand samples' physical times

``verify`` adds ``annotation/`` with the pipeline's products.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
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
from .calib import HandEyeObservation, HandEyeResult, handeye_closed_form, handeye_trajectory, pivot_calibrate
from .errors import InvalidConfig
from .geom import RigidTransform, Trajectory, pose_error, quat_angle, quat_conjugate, quat_multiply
from .registration import IcpParams, PointCloud, kabsch_fit
from .sim import (
    BOARD_FRAME,
    SessionConfig,
    SessionGroundTruth,
    generate_scene,
    recording_times,
    simulate_background_scan,
    simulate_board_touches,
    simulate_pivot_session,
    simulate_recording,
    simulate_tip_measurements,
)
from .sync import SyncResult, apply_offset, distance_curve, estimate_offset_icp

SYNC_MAX_ROUNDS = 20
SYNC_ROUND_TOL = 1e-12  # s


# --------------------------------------------------------------------------
# writing and loading sessions
# --------------------------------------------------------------------------


def simulate_session(directory, config: SessionConfig) -> SessionGroundTruth:
    """Generate a session and write observations plus ground truth to ``directory``."""
    root = Path(directory)
    for sub in ("meshes", "observations/tips", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    gt = generate_scene(config)
    obs = root / "observations"
    formats.write_config(root / "config.json", config)
    for oid, mesh in gt.meshes.items():
        formats.write_ply(root / "meshes" / f"{oid}.ply", mesh)

    static = config.static_noise
    formats.write_poses(obs / "pivot_poses.json", simulate_pivot_session(gt, static, config.pivot_poses))
    formats.write_point_cloud(obs / "board_points.json", PointCloud(gt.board_points, BOARD_FRAME))
    formats.write_poses(obs / "board_touches.json", simulate_board_touches(gt, static).marker_poses)
    for oid in gt.object_ids:
        session, corr = simulate_tip_measurements(gt, oid, config.tip_points, static)
        formats.write_poses(obs / "tips" / f"{oid}.json", session.marker_poses)
        formats.write_point_cloud(obs / "tips" / f"{oid}_correspondences.json", corr)
    scan, init = simulate_background_scan(gt, static)
    formats.write_point_cloud(obs / "background_scan.json", scan)
    formats.write_pose(obs / "background_init.json", init)
    marker, board = simulate_recording(gt)
    rate = config.keyframes / config.duration if config.method == "robot" else None
    formats.write_trajectory(obs / "marker_trajectory.json", marker, rate or config.tracker_rate)
    formats.write_trajectory(obs / "board_detections.json", board, rate or config.camera_rate)

    truth = root / "truth"
    formats.write_scene(truth / "scene.json", gt.scene, {oid: f"../meshes/{oid}.ply" for oid in gt.meshes})
    formats.write_json(
        truth / "tip.json",
        {
            "tool_frame": config.tool_frame,
            "base_frame": config.base_frame,
            "tip_offset": gt.tip_offset.tolist(),
            "pivot_point": gt.pivot_point.tolist(),
        },
    )
    formats.write_pose(truth / "hand_eye.json", gt.hand_eye)
    formats.write_pose(truth / "board_pose.json", gt.board_pose)
    hand_times, _ = recording_times(config)
    formats.write_trajectory(truth / "camera_trajectory.json", gt.camera_trajectory(hand_times))
    return gt


@dataclass(frozen=True, eq=False)
class Session:
    config: SessionConfig
    root: Path
    meshes: dict
    pivot_poses: list
    board_points: PointCloud
    board_touches: list
    tips: dict  # object id -> (pose list, correspondences)
    background_scan: PointCloud
    background_init: RigidTransform
    marker: Trajectory
    board: Trajectory


def load_session(directory) -> Session:
    root = Path(directory)
    if not root.is_dir():
        raise formats.FormatError("session directory does not exist", root)
    config = formats.read_config(root / "config.json")
    obs = root / "observations"
    meshes = {}
    for path in sorted((root / "meshes").glob("*.ply")):
        meshes[path.stem] = formats.read_ply(path, path.stem)
    tips = {}
    for path in sorted((obs / "tips").glob("*.json")):
        if path.stem.endswith("_correspondences"):
            continue
        corr_path = path.with_name(f"{path.stem}_correspondences.json")
        tips[path.stem] = (formats.read_poses(path), formats.read_point_cloud(corr_path))
    return Session(
        config,
        root,
        meshes,
        formats.read_poses(obs / "pivot_poses.json"),
        formats.read_point_cloud(obs / "board_points.json"),
        formats.read_poses(obs / "board_touches.json"),
        tips,
        formats.read_point_cloud(obs / "background_scan.json"),
        formats.read_pose(obs / "background_init.json"),
        formats.read_trajectory(obs / "marker_trajectory.json"),
        formats.read_trajectory(obs / "board_detections.json"),
    )


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def synchronize_hand_eye(
    camera_traj: Trajectory,
    marker_traj: Trajectory,
    dt: float,
    window: float = 0.0,
    max_offset: float = 1.0,
) -> tuple[HandEyeResult, SyncResult]:
    """Jointly estimate the marker stream's time offset and the hand-eye transform.

    The camera stream (from board detections) and the marker stream carried
    through the current hand-eye estimate describe the same physical path,
    so their distance curves differ only by the time offset. Each round
    re-estimates the offset against the latest hand-eye, then recalibrates
    on the shifted marker stream; rounds stop once the offset settles.
    """
    a = distance_curve(camera_traj, dt, window)
    hand_eye = handeye_trajectory(camera_traj, marker_traj)
    sync = None
    offset = 0.0
    for _ in range(SYNC_MAX_ROUNDS):
        carried = annotate_camera_trajectory(marker_traj, hand_eye.x)
        sync = estimate_offset_icp(a, distance_curve(carried, dt, window), max_offset, init=offset)
        hand_eye = handeye_trajectory(camera_traj, apply_offset(marker_traj, sync.offset))
        done = abs(sync.offset - offset) < SYNC_ROUND_TOL
        offset = sync.offset
        if done:
            break
    return hand_eye, sync


@dataclass(frozen=True, eq=False)
class PipelineResult:
    pivot: object  # PivotResult
    board_in_base: RigidTransform
    objects: list  # ObjectAnnotation
    background: ObjectAnnotation
    hand_eye: HandEyeResult
    sync: SyncResult | None
    camera_trajectory: Trajectory
    budget: ErrorBudget


def _icp_params(config: SessionConfig) -> IcpParams:
    # trimming discards real measurements on clean data and can let a part slide
    # along its surface, so only trim when there is noise to reject
    noisy = config.static_noise.sigma_t > 0 or config.static_noise.sigma_r > 0
    return IcpParams(trim_fraction=0.1 if noisy else 0.0)


def run_pipeline(session: Session) -> PipelineResult:
    """Pivot, object annotation, background, hand-eye (and sync), camera trajectory, budget."""
    cfg = session.config
    params = _icp_params(cfg)
    pivot = pivot_calibrate(session.pivot_poses)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        board_pts = tip_points(TipMeasurementSession(session.board_touches, pivot.tip_offset))
    board_in_base = kabsch_fit(session.board_points, board_pts)

    objects = []
    for oid, (poses, corr) in session.tips.items():
        pts = tip_points(TipMeasurementSession(poses, pivot.tip_offset))
        objects.append(
            annotate_object(pts, session.meshes[oid], corr, params, oid, f"../meshes/{oid}.ply", cfg.method)
        )
    background = align_background(
        session.background_scan,
        session.meshes["background"],
        session.background_init,
        params,
        mesh_ref="../meshes/background.ply",
        method=cfg.method,
    )

    if cfg.method == "robot":
        obs = [
            HandEyeObservation.from_board(session.marker.pose(i), board_in_base, session.board.pose(i))
            for i in range(len(session.marker))
        ]
        hand_eye = handeye_closed_form(obs)
        sync = None
        synced = session.marker
    else:
        camera = camera_from_board(session.board, board_in_base)
        hand_eye, sync = synchronize_hand_eye(
            camera, session.marker, 1.0 / cfg.tracker_rate, cfg.sync_window, cfg.sync_max_offset
        )
        synced = apply_offset(session.marker, sync.offset)
    camera_traj = annotate_camera_trajectory(synced, hand_eye.x)
    return PipelineResult(
        pivot, board_in_base, objects, background, hand_eye, sync, camera_traj, session_budget(cfg, objects, hand_eye)
    )


def session_budget(cfg: SessionConfig, objects, hand_eye: HandEyeResult) -> ErrorBudget:
    """Budget from the pipeline's own residuals plus the configured tracking noise."""
    icp = [a.icp_rmse for a in objects]
    obj_rmse = float(np.sqrt(np.mean(np.square(icp)))) if icp else 0.0
    tracking = ErrorStage(
        "tracking",
        cfg.static_noise.sigma_t,
        cfg.static_noise.sigma_r,
        cfg.lever_arm,
        cfg.dynamic_noise.sigma_t,
        cfg.dynamic_noise.sigma_r,
    )
    return error_budget(
        [
            ErrorStage("object", obj_rmse, 0.0),
            ErrorStage("hand_eye", hand_eye.trans_residual_rmse, hand_eye.rot_residual_rmse),
            tracking,
        ]
    )


# --------------------------------------------------------------------------
# verification against ground truth
# --------------------------------------------------------------------------


def _err(a: RigidTransform, b: RigidTransform) -> dict:
    t, r = pose_error(a, b)
    return {"trans_mm": t * 1000.0, "rot_deg": r}


def _trajectory_errors(est: Trajectory, truth: Trajectory) -> dict:
    if len(est) != len(truth):
        raise InvalidConfig("estimated and true camera trajectories differ in length")
    trans = np.linalg.norm(est.translations - truth.translations, axis=1) * 1000.0
    rot = np.degrees(quat_angle(quat_multiply(est.quats, quat_conjugate(truth.quats))))
    return {
        "samples": len(est),
        "trans_rmse_mm": float(np.sqrt(np.mean(trans**2))),
        "trans_max_mm": float(trans.max()),
        "rot_rmse_deg": float(np.sqrt(np.mean(rot**2))),
        "rot_max_deg": float(rot.max()),
    }


def verify_session(directory) -> dict:
    """Run the pipeline on a simulated session and compare every product with ground truth.

    Writes the products to ``annotation/`` inside the session and returns a
    report (millimeters and degrees).
    """
    root = Path(directory)
    session = load_session(root)
    cfg = session.config
    res = run_pipeline(session)

    truth = root / "truth"
    tip_doc = formats.JsonReader(truth / "tip.json")
    true_tip = tip_doc.field_vector(tip_doc.data, "tip_offset", [], 3)
    true_pivot = tip_doc.field_vector(tip_doc.data, "pivot_point", [], 3)
    scene = formats.read_scene(truth / "scene.json")
    true_poses = {o.object_id: o.pose for o in scene.objects}
    true_he = formats.read_pose(truth / "hand_eye.json")
    true_cam = formats.read_trajectory(truth / "camera_trajectory.json")

    objects = {a.object_id: {**_err(a.pose, true_poses[a.object_id]), "icp_rmse_mm": a.icp_rmse * 1000.0}
               for a in res.objects}
    report = {
        "method": cfg.method,
        "seed": cfg.seed,
        "tip_offset_error_mm": float(np.linalg.norm(res.pivot.tip_offset - true_tip)) * 1000.0,
        "pivot_point_error_mm": float(np.linalg.norm(res.pivot.pivot_point - true_pivot)) * 1000.0,
        "board_pose_error": _err(res.board_in_base, formats.read_pose(truth / "board_pose.json")),
        "hand_eye_error": _err(res.hand_eye.x, true_he),
        "objects": objects,
        "background_error": _err(res.background.pose, true_poses["background"]),
        "camera_trajectory_error": _trajectory_errors(res.camera_trajectory, true_cam),
        "error_budget": {"lower_mm": res.budget.lower_bound * 1000.0, "upper_mm": res.budget.upper_bound * 1000.0},
    }
    if res.sync is not None:
        report["time_offset"] = {
            "estimated_s": res.sync.offset,
            "injected_s": cfg.injected_time_offset,
            "error_s": res.sync.offset - cfg.injected_time_offset,
            "converged": res.sync.converged,
        }
    trans = [report["hand_eye_error"]["trans_mm"], report["camera_trajectory_error"]["trans_max_mm"],
             report["tip_offset_error_mm"]] + [o["trans_mm"] for o in objects.values()]
    rot = [report["hand_eye_error"]["rot_deg"], report["camera_trajectory_error"]["rot_max_deg"]] + [
        o["rot_deg"] for o in objects.values()
    ]
    report["max_trans_error_mm"] = max(trans)
    report["max_rot_error_deg"] = max(rot)

    out = root / "annotation"
    out.mkdir(exist_ok=True)
    formats.write_trajectory(out / "camera_trajectory.json", res.camera_trajectory)
    formats.write_handeye_result(out / "hand_eye.json", res.hand_eye)
    formats.write_pivot_result(out / "pivot.json", res.pivot, (cfg.tool_frame, cfg.base_frame))
    formats.write_annotation_file(
        out / "annotation.json", res.objects + [res.background], "camera_trajectory.json", res.budget
    )
    formats.write_json(out / "report.json", report)
    return report

