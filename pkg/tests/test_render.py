import math

import numpy as np
import pytest

from rig_annotate.errors import EmptyScene, FrameMismatch, InvalidGeometry
from rig_annotate.geom import RigidTransform
from rig_annotate.primitives import box, icosphere, plane
from rig_annotate.registration import TriangleMesh
from rig_annotate.render import (
    BACKGROUND_ID,
    INVALID_DEPTH,
    PinholeCamera,
    Scene,
    SceneObject,
    build_bvh,
    render,
    render_depth,
    render_instance_mask,
)
from rig_annotate.sim import SessionConfig, generate_scene

CAM = PinholeCamera(80.0, 80.0, 40.0, 30.0, 80, 60)
EYE = RigidTransform.identity("CAM", "W")


def placed(object_id, mesh, t=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)):
    return SceneObject(object_id, mesh, RigidTransform(q, t, mesh.frame, "W"))


def sphere_depth(cam, center, radius):
    """Analytic z-depth of the near sphere surface per pixel, NaN on miss."""
    d = cam.pixel_directions()
    c = np.asarray(center)
    a = np.sum(d * d, axis=-1)
    b = -2.0 * d @ c
    disc = b * b - 4 * a * (c @ c - radius**2)
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    return np.where(disc >= 0, t, np.nan)


def test_camera_validation():
    with pytest.raises(InvalidGeometry):
        PinholeCamera(0.0, 1.0, 0, 0, 10, 10)
    with pytest.raises(InvalidGeometry):
        PinholeCamera(1.0, 1.0, 10.0, 0, 10, 10)


def test_plane_depth_is_constant():
    scene = Scene([placed("wall", plane(20.0, 20.0, "P"), (0.0, 0.0, 1.0))])
    depth, ids = render(scene, CAM, EYE)
    assert np.all(depth.valid)
    np.testing.assert_allclose(depth.values, 1.0, atol=1e-9)
    assert np.all(ids.values == 1)


def test_sphere_exact_hit_mesh():
    # vertices sit exactly where the pixel-center rays meet the sphere, so the
    # rendered depth must equal the analytic ray-sphere depth at every pixel
    center, radius = np.array([0.0, 0.0, 2.0]), 1.0
    cam = PinholeCamera(40.0, 40.0, 20.5, 20.5, 41, 41)
    z = sphere_depth(cam, center, radius)
    verts = cam.pixel_directions() * z[..., None]
    h, w = z.shape
    idx = np.arange(h * w).reshape(h, w)
    ok = ~np.isnan(z)
    tris = []
    for v in range(h - 1):
        for u in range(w - 1):
            quad = [idx[v, u], idx[v, u + 1], idx[v + 1, u + 1], idx[v + 1, u]]
            if ok[v, u] and ok[v, u + 1] and ok[v + 1, u + 1] and ok[v + 1, u]:
                tris += [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
    flat = np.nan_to_num(verts.reshape(-1, 3))
    mesh = TriangleMesh(flat, np.array(tris), "S")
    depth = render_depth(Scene([placed("s", mesh)]), cam, RigidTransform.identity("CAM", "W"))
    covered = np.zeros_like(ok)
    for t in tris:
        for k in t:
            covered[np.unravel_index(k, ok.shape)] = True
    assert covered.sum() > 600
    np.testing.assert_allclose(depth.values[covered], z[covered], atol=1e-6)
    # center pixel ray goes straight down the axis
    assert depth.values[20, 20] == pytest.approx(1.0, abs=1e-12)


def test_icosphere_within_chord_error():
    radius = 1.0
    mesh = icosphere(radius, 4, "S")
    scene = Scene([placed("s", mesh, (0.0, 0.0, 2.0))])
    depth = render_depth(scene, CAM, EYE)
    z = sphere_depth(CAM, [0.0, 0.0, 2.0], radius)
    both = depth.valid & ~np.isnan(z)
    # facets lie inside the sphere; sagitta of the longest edge bounds the gap
    a, b, c = mesh.corners()
    edge = max(np.linalg.norm(b - a, axis=1).max(), np.linalg.norm(c - b, axis=1).max())
    sagitta = radius - math.sqrt(radius**2 - (edge / 2) ** 2)
    assert both.sum() > 0.9 * (~np.isnan(z)).sum()
    gap = depth.values[both] - z[both]
    assert gap.min() >= -1e-9
    # z-depth gap along a grazing ray is larger than the radial gap; stay well inside the disc
    central = both & (np.abs(z - 1.0) < 0.2)
    assert np.max(depth.values[central] - z[central]) < 4 * sagitta


def test_empty_region_is_invalid():
    scene = Scene([placed("s", icosphere(0.1, 2, "S"), (0.0, 0.0, 2.0))])
    depth, ids = render(scene, CAM, EYE)
    assert depth.values[0, 0] == INVALID_DEPTH
    assert ids.values[0, 0] == BACKGROUND_ID
    assert depth.values[30, 40] > 0


def test_single_triangle_bvh():
    mesh = TriangleMesh([[0, 0, 1.0], [1, 0, 1.0], [0, 1, 1.0]], [[0, 1, 2]], "T")
    accel = build_bvh(Scene([placed("t", mesh)]))
    assert len(accel) == 1
    t, tri = accel.intersect([0, 0, 0], [[0.2, 0.2, 1.0], [0.9, 0.9, 1.0], [0.0, 0.0, -1.0]])
    assert t[0] == pytest.approx(1.0) and tri[0] == 0
    assert tri[1] == -1 and tri[2] == -1
    assert math.isinf(t[1])


def test_bvh_matches_exhaustive_icosphere():
    mesh = icosphere(0.5, 5, "S")
    assert len(mesh.triangles) >= 10_000
    accel = build_bvh(Scene([placed("s", mesh, (0.1, -0.2, 0.3))]))
    rng = np.random.default_rng(0)
    origins = rng.uniform(-2, 2, size=(1000, 3))
    targets = rng.uniform(-0.6, 0.6, size=(1000, 3))
    dirs = targets - origins
    t1, i1 = accel.intersect(origins, dirs)
    t2, i2 = accel.intersect_exhaustive(origins, dirs)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_array_equal(t1, t2)
    assert (i1 >= 0).mean() > 0.5


def test_bvh_matches_exhaustive_random_scenes():
    for seed in range(3):
        gt = generate_scene(SessionConfig(seed=seed, object_count=6))
        accel = build_bvh(gt.scene)
        rng = np.random.default_rng(seed)
        origins = rng.uniform(-1, 1, size=(3000, 3)) + np.array([0, 0, 0.6])
        dirs = rng.normal(size=(3000, 3))
        t1, i1 = accel.intersect(origins, dirs)
        t2, i2 = accel.intersect_exhaustive(origins, dirs)
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_allclose(t1, t2, atol=1e-12)


def test_mask_agrees_with_depth():
    gt = generate_scene(SessionConfig(seed=1, object_count=5))
    pose = gt.camera_trajectory([1.0]).pose(0)
    cam = PinholeCamera(120.0, 120.0, 80.0, 60.0, 160, 120)
    depth, ids = render(gt.scene, cam, pose)
    assert np.array_equal(depth.valid, ids.values != BACKGROUND_ID)
    assert np.all(depth.values[depth.valid] > 0)
    np.testing.assert_array_equal(render_instance_mask(gt.scene, cam, pose).values, ids.values)


def test_occlusion_against_per_object_oracle():
    near = placed("near", icosphere(0.3, 3, "A"), (0.1, 0.0, 1.5))
    far = placed("far", icosphere(0.5, 3, "B"), (-0.1, 0.05, 2.5))
    scene = Scene([far, near])
    _, ids = render(scene, CAM, EYE)
    d_far = render_depth(Scene([far]), CAM, EYE).values
    d_near = render_depth(Scene([near]), CAM, EYE).values
    inf = np.inf
    zf = np.where(d_far > 0, d_far, inf)
    zn = np.where(d_near > 0, d_near, inf)
    expect = np.where(np.isinf(np.minimum(zf, zn)), 0, np.where(zn <= zf, 2, 1))
    np.testing.assert_array_equal(ids.values, expect)
    assert ((zn < inf) & (zf < inf)).sum() > 50


def test_single_object_covering_view():
    scene = Scene([placed("b", box((10.0, 10.0, 1.0), "B"), (0.0, 0.0, 2.0))])
    _, ids = render(scene, CAM, EYE)
    assert np.all(ids.values == 1)


def test_triangle_order_invariance():
    mesh = icosphere(0.4, 3, "S")
    perm = np.random.default_rng(2).permutation(len(mesh.triangles))
    shuffled = TriangleMesh(mesh.vertices, mesh.triangles[perm], "S")
    a = render_depth(Scene([placed("s", mesh, (0.05, 0.0, 1.2))]), CAM, EYE)
    b = render_depth(Scene([placed("s", shuffled, (0.05, 0.0, 1.2))]), CAM, EYE)
    np.testing.assert_array_equal(a.values, b.values)


def test_render_is_deterministic():
    gt = generate_scene(SessionConfig(seed=3))
    pose = gt.camera_trajectory([2.0]).pose(0)
    a, _ = render(gt.scene, CAM, pose)
    b, _ = render(gt.scene, CAM, pose)
    assert np.array_equal(a.values, b.values)


def test_render_errors():
    with pytest.raises(EmptyScene):
        render(Scene([]), CAM, EYE)
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int), "E")
    with pytest.raises(EmptyScene):
        build_bvh(Scene([placed("e", empty)]))
    scene = Scene([placed("s", icosphere(0.1, 1, "S"), (0, 0, 1))])
    with pytest.raises(FrameMismatch):
        render(scene, CAM, RigidTransform.identity("CAM", "X"))
    with pytest.raises(InvalidGeometry):
        Scene([placed("s", icosphere(0.1, 1, "S")), placed("s", icosphere(0.1, 1, "S"))])
