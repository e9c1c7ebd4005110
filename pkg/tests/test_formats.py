import math

import numpy as np
import pytest

from rig_annotate import formats
from rig_annotate.annotate import ErrorBudget, ErrorStage, ObjectAnnotation
from rig_annotate.calib import HandEyeObservation, HandEyeResult, PivotResult
from rig_annotate.errors import FormatError
from rig_annotate.geom import RigidTransform, Trajectory
from rig_annotate.registration import PointCloud, TriangleMesh
from rig_annotate.render import DepthMap, IdMap, PinholeCamera, Scene, SceneObject
from rig_annotate.sim import NoiseModel, SessionConfig
from rig_annotate.sync import SyncResult

N = 1000


def rand_pose(rng, a="A", b="B"):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.normal(size=3) * 10 ** rng.uniform(-4, 1), a, b)


def rand_frame(rng):
    return "".join(rng.choice(list("ABCDEFGHXYZ_0123"), size=rng.integers(1, 6)))


def same_pose(a, b):
    assert (a.from_frame, a.to_frame) == (b.from_frame, b.to_frame)
    np.testing.assert_array_equal(a.rotation, b.rotation)
    np.testing.assert_array_equal(a.translation, b.translation)


def mm_close(a, b):
    # fields stored in millimeters convert back with one rounding
    assert a == pytest.approx(b, rel=1e-15, abs=1e-300) or (math.isnan(a) and math.isnan(b))


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(2024)


# round trips -----------------------------------------------------------------


def test_pose_roundtrip(tmp_path, rng):
    f = tmp_path / "pose.json"
    for _ in range(N):
        t = rand_pose(rng, rand_frame(rng), rand_frame(rng))
        formats.write_pose(f, t)
        same_pose(formats.read_pose(f), t)


def test_pose_list_roundtrip(tmp_path, rng):
    f = tmp_path / "poses.json"
    for _ in range(N):
        poses = [rand_pose(rng, "PB", "TB") for _ in range(rng.integers(0, 6))]
        formats.write_poses(f, poses, "PB", "TB")
        back = formats.read_poses(f)
        assert len(back) == len(poses)
        for a, b in zip(back, poses):
            same_pose(a, b)


def test_trajectory_roundtrip(tmp_path, rng):
    f = tmp_path / "traj.json"
    for _ in range(N):
        n = int(rng.integers(1, 8))
        times = np.cumsum(rng.uniform(1e-3, 1.0, n)) + rng.normal() * 100
        q = rng.normal(size=(n, 4))
        traj = Trajectory("TB", "MB", times, q, rng.normal(size=(n, 3)))
        formats.write_trajectory(f, traj)
        back = formats.read_trajectory(f)
        np.testing.assert_array_equal(back.times, traj.times)
        np.testing.assert_array_equal(back.quats, traj.quats)
        np.testing.assert_array_equal(back.translations, traj.translations)
        assert (back.parent_frame, back.child_frame) == ("TB", "MB")


def test_point_cloud_roundtrip(tmp_path, rng):
    f = tmp_path / "cloud.json"
    for _ in range(N):
        cloud = PointCloud(rng.normal(size=(rng.integers(0, 10), 3)) * 10 ** rng.uniform(-6, 3), rand_frame(rng))
        formats.write_point_cloud(f, cloud)
        back = formats.read_point_cloud(f)
        np.testing.assert_array_equal(back.points, cloud.points)
        assert back.frame == cloud.frame


def test_observations_roundtrip(tmp_path, rng):
    f = tmp_path / "obs.json"
    for _ in range(N):
        obs = [HandEyeObservation(rand_pose(rng, "EE", "RB"), rand_pose(rng, "CB", "RB")) for _ in range(3)]
        formats.write_observations(f, obs)
        for a, b in zip(formats.read_observations(f), obs):
            same_pose(a.base_to_hand, b.base_to_hand)
            same_pose(a.hand_eye_chain, b.hand_eye_chain)


def test_camera_roundtrip(tmp_path, rng):
    f = tmp_path / "cam.json"
    for _ in range(N):
        w, h = int(rng.integers(1, 2000)), int(rng.integers(1, 2000))
        cam = PinholeCamera(rng.uniform(1, 2000), rng.uniform(1, 2000), rng.uniform(0, w), rng.uniform(0, h), w, h)
        formats.write_camera(f, cam)
        assert formats.read_camera(f) == cam


def test_ply_roundtrip(tmp_path, rng):
    f = tmp_path / "mesh.ply"
    for _ in range(N):
        nv = int(rng.integers(3, 12))
        v = rng.normal(size=(nv, 3)) * 10 ** rng.uniform(-3, 1)
        tris = np.array([rng.choice(nv, 3, replace=False) for _ in range(rng.integers(0, 8))]).reshape(-1, 3)
        mesh = TriangleMesh(v, tris, "M")
        formats.write_ply(f, mesh)
        back = formats.read_ply(f, "M")
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_depth_pgm_roundtrip(tmp_path, rng):
    f = tmp_path / "depth.pgm"
    for _ in range(N):
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        mm = rng.integers(1, 65536, size=(h, w)) * (rng.random((h, w)) > 0.2)
        depth = DepthMap(mm / 1000.0)
        formats.write_depth_pgm(f, depth)
        back = formats.read_depth_pgm(f)
        np.testing.assert_array_equal(back.valid, depth.valid)
        np.testing.assert_array_equal(formats.depth_to_pgm(back), mm)
        np.testing.assert_allclose(back.values, depth.values, atol=1e-12)


def test_depth_pgm_quantization():
    d = DepthMap(np.array([[0.0, 0.0004, 1.2344, 70.0]]))
    np.testing.assert_array_equal(formats.depth_to_pgm(d), [[0, 1, 1234, 65535]])


def test_mask_pgm_roundtrip(tmp_path, rng):
    f = tmp_path / "mask.pgm"
    for _ in range(N):
        ids = rng.integers(0, 256, size=(int(rng.integers(1, 10)), int(rng.integers(1, 10))))
        formats.write_mask_pgm(f, IdMap(ids))
        np.testing.assert_array_equal(formats.read_mask_pgm(f).values, ids)


def test_pgm_is_big_endian(tmp_path):
    f = tmp_path / "x.pgm"
    formats.write_pgm(f, np.array([[258]]), 65535)
    assert f.read_bytes() == b"P5\n1 1\n65535\n\x01\x02"


def test_scene_roundtrip(tmp_path, rng):
    mesh_file = tmp_path / "meshes" / "m.ply"
    mesh_file.parent.mkdir()
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], "M")
    formats.write_ply(mesh_file, mesh)
    f = tmp_path / "scene.json"
    for _ in range(N // 10):
        objs = [SceneObject(f"o{i}", TriangleMesh(mesh.vertices, mesh.triangles, f"F{i}"),
                            rand_pose(rng, f"F{i}", "W")) for i in range(3)]
        formats.write_scene(f, Scene(objs), {o.object_id: "meshes/m.ply" for o in objs})
        back = formats.read_scene(f)
        for a, b in zip(back.objects, objs):
            assert a.object_id == b.object_id
            same_pose(a.pose, b.pose)
            np.testing.assert_array_equal(a.mesh.vertices, b.mesh.vertices)


def test_result_roundtrips(tmp_path, rng):
    f = tmp_path / "res.json"
    for _ in range(N):
        piv = PivotResult(rng.normal(size=3), rng.normal(size=3), rng.uniform(0, 1e-3), rng.uniform(1, 100))
        formats.write_pivot_result(f, piv)
        back = formats.read_pivot_result(f)
        np.testing.assert_array_equal(back.tip_offset, piv.tip_offset)
        np.testing.assert_array_equal(back.pivot_point, piv.pivot_point)
        mm_close(back.rmse, piv.rmse)
        np.testing.assert_array_equal(formats.read_tip_offset(f), piv.tip_offset)

        he = HandEyeResult(rand_pose(rng, "CB", "MB"), rng.uniform(0, 1e-2), rng.uniform(0, 2),
                           [(rng.uniform(0, 1e-2), rng.uniform(0, 2)) for _ in range(3)])
        formats.write_handeye_result(f, he)
        back = formats.read_handeye_result(f)
        same_pose(back.x, he.x)
        same_pose(formats.read_hand_eye(f), he.x)
        mm_close(back.trans_residual_rmse, he.trans_residual_rmse)
        assert back.rot_residual_rmse == he.rot_residual_rmse
        for (t1, r1), (t2, r2) in zip(back.per_frame_errors, he.per_frame_errors):
            mm_close(t1, t2)
            assert r1 == r2

        sr = SyncResult(rng.normal(), rng.uniform(0, 1e-2), int(rng.integers(0, 100)),
                        bool(rng.integers(0, 2)), str(rng.choice(["icp", "brute_force"])))
        formats.write_sync_result(f, sr)
        back = formats.read_sync_result(f)
        assert (back.offset, back.iterations, back.converged, back.method) == (
            sr.offset, sr.iterations, sr.converged, sr.method)
        mm_close(back.residual, sr.residual)


def _rand_annotation(rng, oid="obj", ref=""):
    return ObjectAnnotation(oid, ref, rand_pose(rng, oid, "TB"),
                            float(rng.choice([math.nan, rng.uniform(0, 1e-3)])),
                            rng.uniform(0, 1e-3), int(rng.integers(0, 40)), str(rng.choice(["robot", "tracker"])))


def _same_annotation(a, b):
    assert (a.object_id, a.mesh_ref, a.point_count, a.method) == (b.object_id, b.mesh_ref, b.point_count, b.method)
    same_pose(a.pose, b.pose)
    mm_close(a.correspondence_rmse, b.correspondence_rmse)
    mm_close(a.icp_rmse, b.icp_rmse)


def _rand_stages(rng):
    out = []
    for i in range(int(rng.integers(1, 4))):
        dyn = rng.random() < 0.5
        out.append(ErrorStage(f"s{i}", rng.uniform(0, 1e-3), rng.uniform(0, 1), rng.uniform(0, 1),
                              rng.uniform(0, 1e-3) if dyn else None, rng.uniform(0, 1) if dyn else None))
    return out


def _same_stage(a, b):
    assert a.name == b.name and a.rot_rmse == b.rot_rmse and a.lever_arm == b.lever_arm
    assert a.dynamic_rot_rmse == b.dynamic_rot_rmse
    mm_close(a.trans_rmse, b.trans_rmse)
    if b.dynamic_trans_rmse is None:
        assert a.dynamic_trans_rmse is None
    else:
        mm_close(a.dynamic_trans_rmse, b.dynamic_trans_rmse)


def test_annotation_and_budget_roundtrips(tmp_path, rng):
    f = tmp_path / "a.json"
    for _ in range(N):
        ann = _rand_annotation(rng)
        formats.write_object_annotation(f, ann)
        _same_annotation(formats.read_object_annotation(f), ann)

        stages = _rand_stages(rng)
        formats.write_stages(f, stages)
        for a, b in zip(formats.read_stages(f), stages):
            _same_stage(a, b)

        budget = ErrorBudget(stages, *sorted(rng.uniform(0, 1e-2, 2)))
        formats.write_budget(f, budget)
        back = formats.read_budget(f)
        mm_close(back.lower_bound, budget.lower_bound)
        mm_close(back.upper_bound, budget.upper_bound)


def test_annotation_file_roundtrip(tmp_path, rng):
    (tmp_path / "m.ply").write_text("")
    (tmp_path / "traj.json").write_text("{}")
    f = tmp_path / "annotation.json"
    for _ in range(N // 10):
        objs = [_rand_annotation(rng, f"o{i}", "m.ply") for i in range(3)]
        budget = ErrorBudget(_rand_stages(rng), 1e-3, 2e-3)
        formats.write_annotation_file(f, objs, "traj.json", budget)
        back, traj, b = formats.read_annotation_file(f)
        for x, y in zip(back, objs):
            _same_annotation(x, y)
        assert traj == tmp_path / "traj.json"
        mm_close(b.upper_bound, 2e-3)


def test_config_roundtrip(tmp_path, rng):
    f = tmp_path / "config.json"
    for _ in range(N // 4):
        cfg = SessionConfig(
            seed=int(rng.integers(0, 2**31)),
            method=str(rng.choice(["robot", "tracker"])),
            object_count=int(rng.integers(0, 9)),
            tip_offset=tuple(rng.normal(size=3) * 0.1),
            hand_eye=rand_pose(rng, "CB", "HAND"),
            duration=float(rng.uniform(2, 20)),
            camera_rate=float(rng.uniform(10, 60)),
            injected_time_offset=float(rng.uniform(-0.5, 0.5)),
            static_noise=NoiseModel(rng.uniform(0, 1e-3), rng.uniform(0, 0.5)),
        )
        formats.write_config(f, cfg)
        back = formats.read_config(f)
        assert formats.config_to_dict(back) == formats.config_to_dict(cfg)


def test_writer_is_deterministic(tmp_path, rng):
    t = rand_pose(rng)
    formats.write_pose(tmp_path / "a.json", t)
    formats.write_pose(tmp_path / "b.json", t)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_dumps_layout():
    text = formats.dumps({"a": [1.0, 2], "b": {"c": None, "d": math.nan}, "e": [{"f": True}]})
    assert text == (
        '{\n  "a": [1.0, 2],\n  "b": {\n    "c": null,\n    "d": null\n  },\n'
        '  "e": [\n    {\n      "f": true\n    }\n  ]\n}\n'
    )


# malformed corpus ------------------------------------------------------------

GOOD_TRAJ = """{
  "meta": {
    "parent_frame": "TB",
    "child_frame": "MB",
    "rate_hz": 60.0,
    "units": "m,s",
    "quat": "wxyz-hamilton"
  },
  "samples": [
    {"t": 0.0, "q": [1.0, 0.0, 0.0, 0.0], "p": [0.0, 0.0, 0.0]},
    {"t": 0.1, "q": [1.0, 0.0, 0.0, 0.0], "p": [0.0, 0.0, 0.1]}
  ]
}
"""

GOOD_PLY = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
3 0 1 2
"""

MALFORMED = [
    # (name, reader, text, expected line, message fragment)
    ("json syntax", formats.read_trajectory, GOOD_TRAJ.replace('"TB",', '"TB"'), 4, "invalid JSON"),
    ("trajectory units", formats.read_trajectory, GOOD_TRAJ.replace('"m,s"', '"mm,s"'), 6, "units"),
    ("trajectory quat len", formats.read_trajectory,
     GOOD_TRAJ.replace('"q": [1.0, 0.0, 0.0, 0.0], "p": [0.0, 0.0, 0.1]', '"q": [1.0, 0.0], "p": [0.0, 0.0, 0.1]'),
     11, "4 numbers"),
    ("trajectory time order", formats.read_trajectory, GOOD_TRAJ.replace('"t": 0.1', '"t": 0.0'), 11, "increasing"),
    ("trajectory missing samples", formats.read_trajectory, GOOD_TRAJ.replace('"samples"', '"sample"'), 1,
     "samples"),
    ("trajectory string time", formats.read_trajectory, GOOD_TRAJ.replace('"t": 0.1', '"t": "0.1"'), 11, "number"),
    ("pose zero quat", formats.read_pose,
     '{\n  "from_frame": "A",\n  "to_frame": "B",\n  "q": [0, 0, 0, 0],\n  "p": [0, 0, 0]\n}\n', 4, "zero norm"),
    ("pose missing frame", formats.read_pose, '{\n  "from_frame": "A",\n  "q": [1, 0, 0, 0],\n  "p": [0, 0, 0]\n}\n',
     1, "to_frame"),
    ("pose empty frame", formats.read_pose,
     '{\n  "from_frame": "",\n  "to_frame": "B",\n  "q": [1, 0, 0, 0],\n  "p": [0, 0, 0]\n}\n', 1, "frame"),
    ("cloud nan", formats.read_point_cloud, '{\n  "frame": "A",\n  "points": [\n    [0, 0, NaN]\n  ]\n}\n', 4,
     "finite"),
    ("camera principal point", formats.read_camera,
     '{\n  "fx": 10, "fy": 10, "cx": 50, "cy": 5,\n  "width": 20,\n  "height": 10\n}\n', 1, "principal point"),
    ("sync bad method", formats.read_sync_result,
     '{\n  "offset_s": 0.0,\n  "residual_mm": 0.0,\n  "iterations": 1,\n  "converged": true,\n  "method": "fft"\n}\n',
     6, "method"),
    ("stages negative", formats.read_stages,
     '{\n  "stages": [\n    {\n      "name": "a",\n      "trans_rmse_mm": -1.0,\n      "rot_rmse_deg": 0.1\n    }\n  ]\n}\n',
     5, ">= 0"),
    ("config unknown field", formats.read_config, '{\n  "seed": 1,\n  "colour": "red"\n}\n', 3, "unknown"),
    ("config bad method", formats.read_config, '{\n  "method": "drone"\n}\n', 2, "method"),
    ("ply magic", formats.read_ply, GOOD_PLY.replace("ply\n", "plx\n", 1), 1, "magic"),
    ("ply quad", formats.read_ply, GOOD_PLY.replace("3 0 1 2", "4 0 1 2 2"), 13, "triangles"),
    ("ply extra property", formats.read_ply, GOOD_PLY.replace("property float z\n", "property float z\nproperty float nx\n"),
     7, "nx"),
    ("ply binary format", formats.read_ply, GOOD_PLY.replace("ascii", "binary_little_endian"), 2, "format"),
    ("ply short vertex row", formats.read_ply, GOOD_PLY.replace("1 0 0\n", "1 0\n"), 11, "3 values"),
    ("ply index range", formats.read_ply, GOOD_PLY.replace("3 0 1 2", "3 0 1 7"), 13, "out of range"),
    ("ply truncated", formats.read_ply, GOOD_PLY.replace("3 0 1 2\n", ""), 12, "ends before"),
    ("ply degenerate", formats.read_ply, GOOD_PLY.replace("0 1 0\n", "2 0 0\n"), 7, "degenerate"),
    ("ply trailing data", formats.read_ply, GOOD_PLY + "1 2 3\n", 14, "unexpected data"),
    ("ply non-numeric", formats.read_ply, GOOD_PLY.replace("1 0 0\n", "1 x 0\n"), 11, "non-numeric"),
]


@pytest.mark.parametrize("name,reader,text,line,fragment", MALFORMED, ids=[m[0] for m in MALFORMED])
def test_malformed_inputs(tmp_path, name, reader, text, line, fragment):
    f = tmp_path / ("bad.ply" if reader is formats.read_ply else "bad.json")
    f.write_text(text)
    with pytest.raises(FormatError) as info:
        reader(f)
    err = info.value
    assert err.path == str(f)
    assert err.line == line
    assert str(err).startswith(f"{f}:{line}: ")
    assert fragment in str(err)


def test_malformed_pgm(tmp_path):
    f = tmp_path / "bad.pgm"
    cases = [
        (b"P2\n1 1\n255\n\x00", 1, "P5"),
        (b"P5\n1 1\n255\n", 4, "bytes"),
        (b"P5\n# comment\n2 x\n255\n\x00\x00", 3, "positive integer"),
        (b"P5\n1 1\n", 3, "truncated"),
        (b"P5\n1 1\n100\n\xff", 4, "exceeds maxval"),
    ]
    for data, line, fragment in cases:
        f.write_bytes(data)
        with pytest.raises(FormatError) as info:
            formats.read_pgm(f)
        assert info.value.line == line, data
        assert fragment in str(info.value)


def test_missing_references(tmp_path):
    f = tmp_path / "scene.json"
    f.write_text('{\n  "objects": [\n    {\n      "object_id": "a",\n      "mesh_ref": "nope.ply",\n'
                 '      "pose": {"from_frame": "A", "to_frame": "W", "q": [1, 0, 0, 0], "p": [0, 0, 0]}\n'
                 '    }\n  ]\n}\n')
    with pytest.raises(FormatError) as info:
        formats.read_scene(f)
    assert info.value.line == 5 and "does not exist" in str(info.value)
    g = tmp_path / "annotation.json"
    formats.write_annotation_file(g, [], "missing.json", None)
    with pytest.raises(FormatError, match="does not exist"):
        formats.read_annotation_file(g)


def test_missing_file_and_non_utf8(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        formats.read_pose(tmp_path / "none.json")
    f = tmp_path / "bin.json"
    f.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(FormatError):
        formats.read_pose(f)
