import math

import numpy as np
import pytest
from hypothesis import given
from scipy.spatial.transform import Rotation

from rig_annotate.errors import EmptyInput, FrameMismatch, InvalidGeometry, OutOfRange, TooFewPoses
from rig_annotate.geom import (
    RigidTransform,
    TimedPose,
    Trajectory,
    average_transforms,
    compose,
    compose_trajectory,
    interpolate_pose,
    invert,
    pose_error,
    resample,
    slerp,
)

from conftest import random_transform, rot_z, transforms


def assert_same_pose(a, b, tol=1e-12):
    assert (a.from_frame, a.to_frame) == (b.from_frame, b.to_frame)
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=tol)


# compose ---------------------------------------------------------------------


def test_compose_identity():
    i = RigidTransform.identity("A")
    out = compose(i, i)
    assert_same_pose(out, i, 0.0)


def test_compose_with_inverse_is_identity(rng):
    t = random_transform(rng)
    assert_same_pose(compose(t, invert(t)), RigidTransform.identity("B"))
    assert_same_pose(compose(invert(t), t), RigidTransform.identity("A"))


def test_compose_matches_matrix_product():
    a = rot_z(90, (1, 0, 0), "B", "C")
    b = rot_z(90, (0, 0, 0), "A", "B")
    c = compose(a, b)
    np.testing.assert_allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-15)
    # (1,0,0) -> Rz90 -> (0,1,0) -> Rz90 -> (-1,0,0) -> +(1,0,0) -> (0,0,0)
    np.testing.assert_allclose(c.apply([1.0, 0.0, 0.0]), [0.0, 0.0, 0.0], atol=1e-15)
    assert (c.from_frame, c.to_frame) == ("A", "C")


def test_compose_random_matches_matrix_oracle(rng):
    for _ in range(100):
        a = random_transform(rng, "B", "C")
        b = random_transform(rng, "A", "B")
        np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_compose_rejects_frame_mismatch(rng):
    with pytest.raises(FrameMismatch):
        compose(random_transform(rng, "A", "B"), random_transform(rng, "A", "B"))


def test_matmul_operator(rng):
    a = random_transform(rng, "B", "C")
    b = random_transform(rng, "A", "B")
    assert_same_pose(a @ b, compose(a, b), 0.0)


@given(transforms("C", "D"), transforms("B", "C"), transforms("A", "B"))
def test_compose_associative(a, b, c):
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    scale = 1.0 + max(np.abs(t.translation).max() for t in (a, b, c))
    np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-12 * scale * 10)


@given(transforms(), transforms("B", "C"))
def test_outputs_are_unit_and_canonical(a, b):
    for t in (a, b, compose(b, a), invert(a)):
        assert abs(np.linalg.norm(t.rotation) - 1.0) < 1e-9
        assert t.rotation[0] >= 0.0
        assert abs(np.linalg.det(t.rotation_matrix) - 1.0) < 1e-9


def test_negated_quaternion_is_same_transform():
    q = np.array([0.2, -0.5, 0.7, 0.3])
    a = RigidTransform(q, [1, 2, 3], "A", "B")
    b = RigidTransform(-q, [1, 2, 3], "A", "B")
    np.testing.assert_array_equal(a.rotation, b.rotation)


def test_invalid_transforms_rejected():
    with pytest.raises(InvalidGeometry):
        RigidTransform([0, 0, 0, 0], [0, 0, 0], "A", "B")
    with pytest.raises(InvalidGeometry):
        RigidTransform([1, 0, 0, 0], [math.nan, 0, 0], "A", "B")
    with pytest.raises(InvalidGeometry):
        RigidTransform([1, 0, 0, 0], [0, 0, 0], "", "B")


def test_transform_is_immutable(rng):
    t = random_transform(rng)
    with pytest.raises(ValueError):
        t.translation[0] = 5.0
    with pytest.raises(AttributeError):
        t.from_frame = "X"


def test_from_matrix_roundtrip(rng):
    t = random_transform(rng)
    assert_same_pose(RigidTransform.from_matrix(t.matrix(), "A", "B"), t)
    with pytest.raises(InvalidGeometry):
        RigidTransform.from_matrix(np.diag([1.0, 1.0, -1.0, 1.0]), "A", "B")


# invert ----------------------------------------------------------------------


def test_invert_identity():
    assert_same_pose(invert(RigidTransform.identity("A")), RigidTransform.identity("A"), 0.0)


@given(transforms())
def test_invert_involution(t):
    back = invert(invert(t))
    np.testing.assert_allclose(back.matrix(), t.matrix(), atol=1e-12 * (1 + np.abs(t.translation).max()))
    assert (back.from_frame, back.to_frame) == (t.from_frame, t.to_frame)


@given(transforms())
def test_invert_matches_matrix_inverse(t):
    inv = invert(t)
    assert (inv.from_frame, inv.to_frame) == (t.to_frame, t.from_frame)
    np.testing.assert_allclose(inv.matrix(), np.linalg.inv(t.matrix()), atol=1e-9)


# pose_error ------------------------------------------------------------------


def test_pose_error_zero(rng):
    t = random_transform(rng)
    assert pose_error(t, t) == (0.0, 0.0)


def test_pose_error_constructed():
    trans, rot = pose_error(rot_z(10, (1, 2, 3)), rot_z(0, (1, 2, 3)))
    assert trans == 0.0
    assert rot == pytest.approx(10.0, abs=1e-12)


def test_pose_error_against_axis_angle_oracle(rng):
    for _ in range(200):
        a = random_transform(rng)
        b = random_transform(rng)
        trans, rot = pose_error(a, b)
        rel = Rotation.from_matrix(a.rotation_matrix @ b.rotation_matrix.T)
        assert rot == pytest.approx(math.degrees(np.linalg.norm(rel.as_rotvec())), abs=1e-9)
        assert trans == pytest.approx(np.linalg.norm(a.translation - b.translation), abs=1e-15)
        assert 0.0 <= rot <= 180.0


@given(transforms(), transforms())
def test_pose_error_symmetric(a, b):
    assert pose_error(a, b) == pytest.approx(pose_error(b, a), abs=1e-9)


def test_pose_error_frame_mismatch(rng):
    with pytest.raises(FrameMismatch):
        pose_error(random_transform(rng, "A", "B"), random_transform(rng, "A", "C"))


def test_pose_error_small_angles_are_accurate():
    _, rot = pose_error(rot_z(1e-7), rot_z(0.0))
    assert rot == pytest.approx(1e-7, rel=1e-6)


# averaging -------------------------------------------------------------------


def test_average_single_is_identity_operation(rng):
    t = random_transform(rng)
    assert average_transforms([t]) is t


def test_average_symmetric_pair():
    avg = average_transforms([rot_z(5, (1, 0, 0)), rot_z(-5, (1, 0, 0))])
    assert_same_pose(avg, rot_z(0, (1, 0, 0)), 1e-12)


def test_average_is_sign_invariant():
    a = rot_z(5)
    b = RigidTransform(-rot_z(-5).rotation, [0, 0, 0], "A", "B")
    assert pose_error(average_transforms([a, b]), rot_z(0))[1] < 1e-9


def test_average_monte_carlo():
    rng = np.random.default_rng(7)
    truth = random_transform(rng, max_t=0.5)
    samples = []
    for _ in range(100):
        axis = rng.normal(size=3)
        angle = math.radians(0.2) * rng.normal()
        d = RigidTransform.from_axis_angle(axis, angle, rng.normal(size=3) * 0.5e-3, "B", "B")
        samples.append(compose(d, truth))
    trans, rot = pose_error(average_transforms(samples), truth)
    assert trans < 0.2e-3
    assert rot < 0.1


def test_average_errors(rng):
    with pytest.raises(EmptyInput):
        average_transforms([])
    with pytest.raises(FrameMismatch):
        average_transforms([random_transform(rng, "A", "B"), random_transform(rng, "A", "C")])


# trajectories ----------------------------------------------------------------


def _circle(times, radius=0.5, rate=0.8):
    """Camera on a circle, rotating about z with the same rate (analytic oracle)."""
    ang = rate * np.asarray(times)
    quats = np.column_stack([np.cos(ang / 2), np.zeros_like(ang), np.zeros_like(ang), np.sin(ang / 2)])
    trans = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), np.full_like(ang, 0.2)])
    return Trajectory("W", "C", times, quats, trans)


def test_trajectory_validation():
    q = np.tile([1.0, 0, 0, 0], (3, 1))
    with pytest.raises(InvalidGeometry):
        Trajectory("W", "C", [0.0, 1.0, 1.0], q, np.zeros((3, 3)))
    with pytest.raises(InvalidGeometry):
        Trajectory("W", "C", [0.0, 1.0], q, np.zeros((3, 3)))
    with pytest.raises(FrameMismatch):
        Trajectory.from_samples("W", "C", [TimedPose(0.0, RigidTransform.identity("C", "X"))])


def test_trajectory_samples_roundtrip():
    traj = _circle(np.linspace(0, 1, 5))
    again = Trajectory.from_samples("W", "C", traj.samples)
    np.testing.assert_array_equal(again.quats, traj.quats)
    np.testing.assert_array_equal(again.translations, traj.translations)
    assert traj.pose(2).from_frame == "C" and traj.pose(2).to_frame == "W"


def test_interpolate_at_sample_is_exact():
    traj = _circle(np.linspace(0, 2, 11))
    for i in range(len(traj)):
        p = interpolate_pose(traj, traj.times[i])
        np.testing.assert_array_equal(p.rotation, traj.quats[i])
        np.testing.assert_array_equal(p.translation, traj.translations[i])


def test_interpolate_slerp_midpoint():
    traj = Trajectory(
        "W", "C", [0.0, 1.0], [rot_z(0).rotation, rot_z(90).rotation], np.zeros((2, 3))
    )
    mid = interpolate_pose(traj, 0.5)
    assert pose_error(mid, rot_z(45, from_frame="C", to_frame="W"))[1] < 1e-12


def test_interpolate_dense_circle_matches_analytic():
    times = np.linspace(0, 5, 5001)
    traj = _circle(times)
    rng = np.random.default_rng(3)
    for t in rng.uniform(0, 5, 50):
        p = interpolate_pose(traj, t)
        truth = _circle([t]).pose(0)
        trans, rot = pose_error(p, truth)
        assert trans < 1e-6
        assert rot < 1e-6


def test_interpolate_out_of_range():
    traj = _circle(np.linspace(0, 1, 3))
    with pytest.raises(OutOfRange):
        interpolate_pose(traj, 1.5)
    with pytest.raises(TooFewPoses):
        resample(_circle([0.0]), [0.0])


def test_slerp_takes_short_arc():
    q0 = rot_z(10).rotation
    q1 = -rot_z(30).rotation
    out = slerp(q0, q1, 0.5)
    assert pose_error(RigidTransform(out, [0, 0, 0], "A", "B"), rot_z(20))[1] < 1e-9


def test_compose_trajectory_matches_per_sample(rng):
    traj = _circle(np.linspace(0, 1, 7))
    right = random_transform(rng, "X", "C")
    left = random_transform(rng, "W", "V")
    out = compose_trajectory(traj, right, left)
    assert (out.parent_frame, out.child_frame) == ("V", "X")
    for i in range(len(traj)):
        expect = compose(left, compose(traj.pose(i), right))
        assert_same_pose(out.pose(i), expect, 1e-12)
    with pytest.raises(FrameMismatch):
        compose_trajectory(traj, random_transform(rng, "X", "Y"))
