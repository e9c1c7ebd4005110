"""Synthetic acquisition sessions with exact ground truth.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence`` with a
spawn key per named stream (``"scene"``, ``"pivot"``, ``"tips/<object>"``,
``"recording"``...), so each stage draws the same numbers no matter which
other stages ran before it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .annotate import TipMeasurementSession
from .errors import InvalidConfig, UnknownObject
from .geom import (
    RigidTransform,
    Trajectory,
    canonicalize_quat,
    compose,
    compose_trajectory,
    invert,
    matrix_to_quat,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
)
from .primitives import box, cylinder, icosphere, sample_surface
from .registration import PointCloud, TriangleMesh
from .render import Scene, SceneObject

CAMERA_FRAME = "CB"
BOARD_FRAME = "BB"


@dataclass(frozen=True)
class NoiseModel:
    sigma_t: float = 0.0  # m, per axis
    sigma_r: float = 0.0  # deg, magnitude of a random-axis rotation

    def __post_init__(self):
        if not (self.sigma_t >= 0 and self.sigma_r >= 0):
            raise InvalidConfig("noise standard deviations must be non-negative")


ZERO_NOISE = NoiseModel()
ROBOT_STATIC = NoiseModel(0.1e-3, 0.0)
TRACKER_STATIC = NoiseModel(0.67e-3, 0.12)
TRACKER_DYNAMIC = NoiseModel(0.92e-3, 0.16)


def _default_hand_eye() -> RigidTransform:
    q = quat_from_axis_angle([0.3, -0.2, 1.0], math.radians(25.0))
    return RigidTransform(q, [0.045, -0.030, 0.085], CAMERA_FRAME, "HAND")


@dataclass(frozen=True)
class SessionConfig:
    seed: int = 0
    method: str = "tracker"
    object_count: int = 3
    tip_offset: tuple = (0.010, -0.005, 0.120)
    # camera -> hand; frame labels are replaced by the method's frames
    hand_eye: RigidTransform = field(default_factory=_default_hand_eye)
    duration: float = 10.0  # s
    orbit_radius: float = 0.55  # m
    orbit_height: float = 0.40  # m above the table
    orbit_rate: float = 0.35  # rad/s
    tracker_rate: float = 60.0  # Hz
    camera_rate: float = 30.0  # Hz
    keyframes: int = 20  # robot stop-and-go frames
    injected_time_offset: float = 0.137  # s, subtracted from marker timestamps
    tip_points: int = 25
    pivot_poses: int = 50
    static_noise: NoiseModel | None = None
    dynamic_noise: NoiseModel | None = None
    # settings the pipeline uses when it processes this session
    sync_window: float = 0.5  # s, position smoothing before arc length
    sync_max_offset: float = 1.5  # s
    lever_arm: float = 0.5  # m, for the tracking stage of the error budget

    def __post_init__(self):
        if self.method not in ("robot", "tracker"):
            raise InvalidConfig(f"method must be 'robot' or 'tracker', got {self.method!r}")
        if self.object_count < 0 or self.object_count > 8:
            raise InvalidConfig("object_count must lie in [0, 8]")
        if not (self.tracker_rate > 0 and self.camera_rate > 0 and self.duration > 0):
            raise InvalidConfig("rates and duration must be positive")
        if self.keyframes < 2 or self.tip_points < 4 or self.pivot_poses < 3:
            raise InvalidConfig("keyframes >= 2, tip_points >= 4 and pivot_poses >= 3 are required")
        if self.sync_window < 0 or not self.sync_max_offset > 0 or self.lever_arm < 0:
            raise InvalidConfig("sync_window and lever_arm must be >= 0, sync_max_offset > 0")
        if abs(self.injected_time_offset) >= 0.75 * self.duration:
            raise InvalidConfig("injected_time_offset leaves too little overlap")
        robot = self.method == "robot"
        if self.static_noise is None:
            object.__setattr__(self, "static_noise", ROBOT_STATIC if robot else TRACKER_STATIC)
        if self.dynamic_noise is None:
            object.__setattr__(self, "dynamic_noise", self.static_noise if robot else TRACKER_DYNAMIC)
        object.__setattr__(self, "tip_offset", tuple(float(v) for v in self.tip_offset))

    @property
    def base_frame(self) -> str:
        return "RB" if self.method == "robot" else "TB"

    @property
    def hand_frame(self) -> str:
        return "EE" if self.method == "robot" else "MB"

    @property
    def tool_frame(self) -> str:
        return "EE" if self.method == "robot" else "PB"

    def zero_noise(self) -> "SessionConfig":
        return replace(self, static_noise=ZERO_NOISE, dynamic_noise=ZERO_NOISE)


@dataclass(frozen=True, eq=False)
class SessionGroundTruth:
    config: SessionConfig
    scene: Scene  # objects plus "background", posed in the base frame
    meshes: dict  # object id -> mesh in its own frame
    board_pose: RigidTransform  # board -> base
    board_points: np.ndarray  # touch targets in the board frame
    pivot_point: np.ndarray  # base frame
    tip_offset: np.ndarray  # tool frame
    hand_eye: RigidTransform  # camera -> hand

    @property
    def object_ids(self) -> list:
        return [o.object_id for o in self.scene.objects if o.object_id != "background"]

    def object_pose(self, object_id: str) -> RigidTransform:
        for o in self.scene.objects:
            if o.object_id == object_id:
                return o.pose
        raise UnknownObject(f"no object {object_id!r} in the session")

    def camera_trajectory(self, times) -> Trajectory:
        """Noise-free camera -> base poses at physical times."""
        return _orbit(self.config, np.asarray(times, dtype=float))

    def marker_trajectory(self, times) -> Trajectory:
        return compose_trajectory(self.camera_trajectory(times), invert(self.hand_eye))


def stage_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named stream of a seeded session."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])))


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def _random_rotations(n: int, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = np.radians(sigma_deg) * rng.normal(size=n)
    half = 0.5 * angles
    return np.column_stack([np.cos(half), np.sin(half)[:, None] * axes])


def perturb_pose(t: RigidTransform, noise: NoiseModel, rng: np.random.Generator) -> RigidTransform:
    """Add isotropic Gaussian translation noise and a random-axis rotation.

    The rotation error is applied on the left (about the pose origin, in
    parent-frame axes) with a Gaussian angle of std ``sigma_r``.
    """
    dt = rng.normal(size=3) * noise.sigma_t
    dq = _random_rotations(1, noise.sigma_r, rng)[0]
    if noise.sigma_t == 0.0 and noise.sigma_r == 0.0:
        return t
    q = t.rotation if noise.sigma_r == 0.0 else quat_multiply(dq, t.rotation)
    return RigidTransform(q, t.translation + dt, t.from_frame, t.to_frame)


def perturb_trajectory(traj: Trajectory, noise: NoiseModel, rng: np.random.Generator) -> Trajectory:
    n = len(traj)
    dt = rng.normal(size=(n, 3)) * noise.sigma_t
    dq = _random_rotations(n, noise.sigma_r, rng)
    if noise.sigma_t == 0.0 and noise.sigma_r == 0.0:
        return traj
    quats = traj.quats if noise.sigma_r == 0.0 else quat_multiply(dq, traj.quats)
    return Trajectory(traj.parent_frame, traj.child_frame, traj.times, quats, traj.translations + dt)


# --------------------------------------------------------------------------
# scene
# --------------------------------------------------------------------------


def background_mesh(frame: str = "background") -> TriangleMesh:
    """Table top with two walls meeting in a corner; the walls make it registrable."""
    s = 0.6
    h = 0.5
    v = np.array(
        [
            [-s, -s, 0.0], [s, -s, 0.0], [s, s, 0.0], [-s, s, 0.0],  # floor
            [-s, s, h], [s, s, h],  # back wall top
            [-s, -s, h],  # left wall top
        ]
    )
    f = np.array([[0, 1, 2], [0, 2, 3], [3, 2, 5], [3, 5, 4], [0, 3, 4], [0, 4, 6]])
    return TriangleMesh(v, f, frame)


def _look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Rotation (camera -> world) with z toward the target and y pointing down."""
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _trajectory_params(config: SessionConfig):
    rng = stage_rng(config.seed, "trajectory")
    return {
        "phase": rng.uniform(0, 2 * np.pi),
        "r_amp": rng.uniform(0.04, 0.08),
        "r_freq": rng.uniform(0.15, 0.3),
        "h_amp": rng.uniform(0.05, 0.10),
        "h_freq": rng.uniform(0.2, 0.4),
        "rate_amp": rng.uniform(0.15, 0.3),
        "rate_freq": rng.uniform(0.1, 0.25),
        "roll_amp": math.radians(rng.uniform(5, 15)),
        "target_amp": rng.uniform(0.02, 0.05),
        "phases": rng.uniform(0, 2 * np.pi, size=5),
    }


def _orbit(config: SessionConfig, times: np.ndarray) -> Trajectory:
    """Smooth analytic orbit around the table center, looking inward."""
    p = _trajectory_params(config)
    ph = p["phases"]
    w = config.orbit_rate
    angle = p["phase"] + w * times + (w * p["rate_amp"] / (2 * np.pi * p["rate_freq"])) * np.sin(
        2 * np.pi * p["rate_freq"] * times + ph[0]
    )
    radius = config.orbit_radius + p["r_amp"] * np.sin(2 * np.pi * p["r_freq"] * times + ph[1])
    height = config.orbit_height + p["h_amp"] * np.sin(2 * np.pi * p["h_freq"] * times + ph[2])
    eye = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), height])
    target = np.column_stack(
        [
            p["target_amp"] * np.sin(0.7 * times + ph[3]),
            p["target_amp"] * np.cos(0.5 * times + ph[4]),
            np.full_like(times, 0.05),
        ]
    )
    roll = p["roll_amp"] * np.sin(0.9 * times + ph[4])
    quats = np.empty((len(times), 4))
    up = np.array([0.0, 0.0, 1.0])
    for i in range(len(times)):
        rot = _look_at(eye[i], target[i], up)
        q = matrix_to_quat(rot)
        quats[i] = quat_multiply(q, quat_from_axis_angle([0, 0, 1], roll[i]))
    return Trajectory(config.base_frame, CAMERA_FRAME, times, canonicalize_quat(quats), eye)


def _make_object(kind: int, rng: np.random.Generator, frame: str):
    if kind == 0:
        size = rng.uniform([0.06, 0.04, 0.03], [0.14, 0.10, 0.08])
        return box(size, frame), 0.5 * float(np.hypot(size[0], size[1])), 0.5 * float(size[2])
    if kind == 1:
        r = rng.uniform(0.03, 0.06)
        return icosphere(r, 2, frame), r, r
    r = rng.uniform(0.025, 0.05)
    h = rng.uniform(0.06, 0.14)
    return cylinder(r, h, 24, frame), r, 0.5 * h


def generate_scene(config: SessionConfig) -> SessionGroundTruth:
    """Objects (box, icosphere, cylinder, ...) resting on a table, plus board and background.

    Object footprints never overlap; everything is deterministic in the seed.
    """
    rng = stage_rng(config.seed, "scene")
    base = config.base_frame
    objects, meshes, placed = [], {}, []
    # board sits in front of the objects, keep its footprint free
    board_center = np.array([0.0, -0.28, 0.0])
    placed.append((board_center[:2], 0.16))
    for i in range(config.object_count):
        oid = f"obj{i}"
        mesh, radius, half_h = _make_object(i % 3, rng, oid)
        for _ in range(1000):
            xy = rng.uniform(-0.22, 0.22, size=2)
            if all(np.linalg.norm(xy - c) > radius + r + 0.01 for c, r in placed):
                break
        else:
            raise InvalidConfig("could not place objects without overlap")
        placed.append((xy, radius))
        yaw = rng.uniform(0, 2 * np.pi)
        pose = RigidTransform(quat_from_axis_angle([0, 0, 1], yaw), [xy[0], xy[1], half_h], oid, base)
        objects.append(SceneObject(oid, mesh, pose))
        meshes[oid] = mesh
    bg = background_mesh()
    meshes["background"] = bg
    objects.append(SceneObject("background", bg, RigidTransform.identity("background", base)))

    gx, gy = np.meshgrid(np.arange(7) * 0.03, np.arange(5) * 0.03)
    board_points = np.column_stack([gx.ravel() - 0.09, gy.ravel() - 0.06, np.zeros(gx.size)])
    board_yaw = rng.uniform(-0.3, 0.3)
    board_pose = RigidTransform(quat_from_axis_angle([0, 0, 1], board_yaw), board_center, BOARD_FRAME, base)
    pivot = np.array([rng.uniform(0.25, 0.35), rng.uniform(0.15, 0.25), 0.0])
    hand_eye = config.hand_eye.relabel(CAMERA_FRAME, config.hand_frame)
    return SessionGroundTruth(
        config,
        Scene(objects),
        meshes,
        board_pose,
        board_points,
        pivot,
        np.array(config.tip_offset),
        hand_eye,
    )


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------


def _tool_orientations(n: int, rng: np.random.Generator, max_tilt_deg: float = 35.0) -> np.ndarray:
    """Tool orientations pointing the tip roughly downward with random spin and tilt."""
    spin = rng.uniform(0, 2 * np.pi, size=n)
    tilt_axis_angle = rng.uniform(0, 2 * np.pi, size=n)
    tilt = np.radians(max_tilt_deg) * np.sqrt(rng.uniform(0.05, 1.0, size=n))
    # tip offset points along marker +z; flip so it points down
    flip = quat_from_axis_angle([1, 0, 0], np.pi)
    out = np.empty((n, 4))
    for i in range(n):
        q_spin = quat_from_axis_angle([0, 0, 1], spin[i])
        axis = [math.cos(tilt_axis_angle[i]), math.sin(tilt_axis_angle[i]), 0.0]
        q_tilt = quat_from_axis_angle(axis, tilt[i])
        out[i] = quat_multiply(q_tilt, quat_multiply(flip, q_spin))
    return canonicalize_quat(out)


def _touch_poses(tips_world: np.ndarray, quats: np.ndarray, tip_offset: np.ndarray, frames, noise, rng):
    rots = quat_to_matrix(quats)
    trans = tips_world - rots @ tip_offset
    poses = [RigidTransform(q, t, *frames) for q, t in zip(quats, trans)]
    return [perturb_pose(p, noise, rng) for p in poses]


def simulate_pivot_session(
    gt: SessionGroundTruth, noise: NoiseModel, n_poses: int, single_axis: bool = False
) -> list:
    """Tool poses pivoting about the ground-truth pivot point.

    ``single_axis`` restricts the motion to rotations about one fixed axis,
    which leaves the pivot problem rank deficient.
    """
    if n_poses < 3:
        raise InvalidConfig("a pivot session needs at least 3 poses")
    rng = stage_rng(gt.config.seed, "pivot")
    if single_axis:
        angles = rng.uniform(-0.6, 0.6, size=n_poses)
        base_q = quat_from_axis_angle([1, 0, 0], np.pi)
        quats = np.array([quat_multiply(quat_from_axis_angle([1, 0, 0], a), base_q) for a in angles])
        quats = canonicalize_quat(quats)
    else:
        quats = _tool_orientations(n_poses, rng)
    tips = np.tile(gt.pivot_point, (n_poses, 1))
    frames = (gt.config.tool_frame, gt.config.base_frame)
    return _touch_poses(tips, quats, gt.tip_offset, frames, noise, rng)


def simulate_tip_measurements(gt: SessionGroundTruth, object_id: str, n_points: int, noise: NoiseModel):
    """Tool poses whose tip touches random surface points of one object.

    Touches are drawn uniformly by area from triangles that do not face the
    table. Returns ``(session, correspondences)`` where the correspondences
    are the touched points in the object's mesh frame, in touch order.
    """
    if n_points < 4:
        raise InvalidConfig("tip measurements need at least 4 points")
    pose = gt.object_pose(object_id)
    mesh = gt.meshes[object_id]
    rng = stage_rng(gt.config.seed, f"tips/{object_id}")
    a, b, c = mesh.corners()
    normals = np.cross(b - a, c - a) @ pose.rotation_matrix.T
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    reachable = np.flatnonzero(normals[:, 2] > -0.5)
    sub = TriangleMesh(mesh.vertices, mesh.triangles[reachable], mesh.frame)
    local, _ = sample_surface(sub, n_points, rng)
    quats = _tool_orientations(n_points, rng)
    frames = (gt.config.tool_frame, gt.config.base_frame)
    poses = _touch_poses(pose.apply(local), quats, gt.tip_offset, frames, noise, rng)
    return TipMeasurementSession(poses, gt.tip_offset), PointCloud(local, mesh.frame)


def simulate_board_touches(gt: SessionGroundTruth, noise: NoiseModel) -> TipMeasurementSession:
    """Tool poses touching every board target point, in ``gt.board_points`` order."""
    rng = stage_rng(gt.config.seed, "board")
    n = len(gt.board_points)
    quats = _tool_orientations(n, rng)
    frames = (gt.config.tool_frame, gt.config.base_frame)
    poses = _touch_poses(gt.board_pose.apply(gt.board_points), quats, gt.tip_offset, frames, noise, rng)
    return TipMeasurementSession(poses, gt.tip_offset)


def recording_times(config: SessionConfig):
    """Physical sample times ``(hand_stream, camera_stream)`` of a recording."""
    if config.method == "robot":
        keys = np.linspace(0.0, config.duration, config.keyframes)
        return keys, keys
    n_hand = int(math.floor(config.duration * config.tracker_rate + 1e-9)) + 1
    n_cam = int(math.floor(config.duration * config.camera_rate + 1e-9)) + 1
    return np.arange(n_hand) / config.tracker_rate, np.arange(n_cam) / config.camera_rate


def simulate_recording(gt: SessionGroundTruth, config: SessionConfig | None = None):
    """Noisy hand (robot EE or tracker marker) trajectory and board detections.

    Returns ``(marker_traj, board_traj)``: hand -> base poses and
    board -> camera poses. The tracker method streams the marker with
    dynamic noise at ``tracker_rate`` and shifts its timestamps by
    ``-injected_time_offset``; board detections get static noise at
    ``camera_rate``. The robot method stops at each keyframe, so both
    streams share exact timestamps and carry static noise only.
    """
    config = config or gt.config
    rng = stage_rng(config.seed, "recording")
    hand_times, cam_times = recording_times(config)
    marker = gt.marker_trajectory(hand_times)
    camera = gt.camera_trajectory(cam_times)
    # board -> camera at each frame: camera_i^-1 ∘ board
    board_in_cam = compose_trajectory(_invert_trajectory(camera), gt.board_pose)
    if config.method == "robot":
        marker = perturb_trajectory(marker, config.static_noise, rng)
        board = perturb_trajectory(board_in_cam, config.static_noise, rng)
        return marker, board
    marker = perturb_trajectory(marker, config.dynamic_noise, rng)
    board = perturb_trajectory(board_in_cam, config.static_noise, rng)
    return marker.with_times(marker.times - config.injected_time_offset), board


def _invert_trajectory(traj: Trajectory) -> Trajectory:
    inv_q = traj.quats * np.array([1.0, -1.0, -1.0, -1.0])
    inv_t = -np.einsum("nij,nj->ni", quat_to_matrix(inv_q), traj.translations)
    return Trajectory(traj.child_frame, traj.parent_frame, traj.times, inv_q, inv_t)


def simulate_background_scan(
    gt: SessionGroundTruth, noise: NoiseModel, n_points: int = 400, init_error=(0.005, 2.0)
):
    """Partial scan of the background (base frame) plus a displaced starting pose.

    Points come from the floor near the corner and the lower part of both
    walls, each with isotropic Gaussian noise of ``noise.sigma_t``. The
    returned init is the true background pose moved by ``init_error``
    (meters, degrees) along random directions.
    """
    rng = stage_rng(gt.config.seed, "background")
    mesh = gt.meshes["background"]
    pose = gt.object_pose("background")
    pts, _ = sample_surface(mesh, 4 * n_points, rng)
    keep = (pts[:, 0] < 0.2) & (pts[:, 1] > -0.2) & (pts[:, 2] < 0.35)
    pts = pts[keep][:n_points]
    pts = pose.apply(pts) + rng.normal(size=pts.shape) * noise.sigma_t
    direction = rng.normal(size=3)
    axis = rng.normal(size=3)
    offset = RigidTransform(
        quat_from_axis_angle(axis, math.radians(init_error[1])),
        init_error[0] * direction / np.linalg.norm(direction),
        pose.to_frame,
        pose.to_frame,
    )
    return PointCloud(pts, pose.to_frame), compose(offset, pose)
