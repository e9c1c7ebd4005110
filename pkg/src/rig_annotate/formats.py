"""File formats: JSON documents, ASCII PLY meshes and binary PGM images.

JSON documents are written with a fixed key order, two-space indentation
and the shortest round-trip representation of every float, so equal values
always produce equal bytes and reading a file back gives the exact values
that were written. Units are meters and seconds, except fields suffixed
``_mm`` (millimeters) and ``_deg`` (degrees). Quaternions are Hamilton,
scalar first (``[w, x, y, z]``).

Readers never let a malformed file escape as anything but
:class:`FormatError`, whose message names the file and line.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .annotate import ErrorBudget, ErrorStage, ObjectAnnotation
from .calib import HandEyeObservation, HandEyeResult, PivotResult
from .errors import FormatError, RigAnnotateError
from .geom import RigidTransform, Trajectory
from .registration import PointCloud, TriangleMesh
from .render import DepthMap, IdMap, INVALID_DEPTH, PinholeCamera, Scene, SceneObject
from .sim import NoiseModel, SessionConfig
from .sync import SyncResult

TRAJECTORY_UNITS = "m,s"
QUAT_CONVENTION = "wxyz-hamilton"
DEPTH_SCALE = 1000.0  # PGM depth units per meter
DEPTH_MAX = 65535
MASK_MAX = 255

_MISSING = object()


# --------------------------------------------------------------------------
# JSON writing
# --------------------------------------------------------------------------


def _scalar(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "null"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _is_flat(v) -> bool:
    return isinstance(v, (list, tuple)) and all(not isinstance(x, (dict, list, tuple)) for x in v)


def _render(v, indent: int) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_render(x, indent + 1)}" for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(v, (list, tuple)):
        if _is_flat(v):
            return "[" + ", ".join(_scalar(x) for x in v) + "]"
        items = [inner + _render(x, indent + 1) for x in v]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return _scalar(v)


def dumps(doc) -> str:
    """Deterministic JSON text; non-finite floats become ``null``."""
    return _render(doc, 0) + "\n"


def write_json(path, doc) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


# --------------------------------------------------------------------------
# JSON reading with line-aware diagnostics
# --------------------------------------------------------------------------


def _keypath_str(keypath) -> str:
    out = ""
    for k in keypath:
        out += f"[{k}]" if isinstance(k, int) else (f".{k}" if out else str(k))
    return out or "document"


class JsonReader:
    """Parsed JSON document plus typed accessors that report ``file:line``."""

    def __init__(self, path):
        self.path = str(path)
        try:
            self.text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FormatError("file not found", self.path) from None
        except IsADirectoryError:
            raise FormatError("expected a file, found a directory", self.path) from None
        except UnicodeDecodeError:
            raise FormatError("file is not UTF-8 text", self.path, 1) from None
        try:
            self.data = json.loads(self.text)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", self.path, e.lineno) from None
        self._tree = None

    def line(self, keypath) -> int:
        """1-based line of the value at ``keypath`` (nearest existing ancestor)."""
        if self._tree is None:
            try:
                self._tree = yaml.compose(self.text)
            except yaml.YAMLError:
                self._tree = False
        node = self._tree
        if not node:
            return 1
        for key in keypath:
            child = None
            if isinstance(node, yaml.MappingNode):
                for k, v in node.value:
                    if k.value == key:
                        child = v
                        break
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                child = node.value[key]
            if child is None:
                break
            node = child
        return node.start_mark.line + 1

    def fail(self, keypath, message):
        raise FormatError(f"{_keypath_str(keypath)}: {message}", self.path, self.line(keypath))

    @contextmanager
    def context(self, keypath):
        """Re-raise domain errors from value construction as located format errors."""
        try:
            yield
        except FormatError:
            raise
        except RigAnnotateError as e:
            self.fail(keypath, str(e))

    # typed accessors -------------------------------------------------------

    def obj(self, value, keypath) -> dict:
        if not isinstance(value, dict):
            self.fail(keypath, f"expected an object, got {_json_type(value)}")
        return value

    def get(self, mapping, key, keypath, default=_MISSING):
        if key not in mapping:
            if default is not _MISSING:
                return default
            self.fail(keypath, f"missing required field {key!r}")
        return mapping[key]

    def array(self, mapping, key, keypath, default=_MISSING) -> list:
        value = self.get(mapping, key, keypath, default)
        if value is default and default is not _MISSING:
            return value
        if not isinstance(value, list):
            self.fail(keypath + [key], f"expected an array, got {_json_type(value)}")
        return value

    def number(self, mapping, key, keypath, default=_MISSING, minimum=None, positive=False, nullable=False):
        value = self.get(mapping, key, keypath, default)
        if value is default and default is not _MISSING:
            return value
        kp = keypath + [key]
        if value is None and nullable:
            return math.nan
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(kp, f"expected a number, got {_json_type(value)}")
        value = float(value)
        if not math.isfinite(value):
            self.fail(kp, "number must be finite")
        if positive and not value > 0:
            self.fail(kp, f"must be positive, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(kp, f"must be >= {minimum}, got {value!r}")
        return value

    def integer(self, mapping, key, keypath, default=_MISSING, minimum=None) -> int:
        value = self.get(mapping, key, keypath, default)
        if value is default and default is not _MISSING:
            return value
        kp = keypath + [key]
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(kp, f"expected an integer, got {_json_type(value)}")
        if minimum is not None and value < minimum:
            self.fail(kp, f"must be >= {minimum}, got {value}")
        return value

    def boolean(self, mapping, key, keypath, default=_MISSING) -> bool:
        value = self.get(mapping, key, keypath, default)
        if not isinstance(value, bool):
            self.fail(keypath + [key], f"expected true or false, got {_json_type(value)}")
        return value

    def string(self, mapping, key, keypath, default=_MISSING, choices=None) -> str:
        value = self.get(mapping, key, keypath, default)
        kp = keypath + [key]
        if not isinstance(value, str):
            self.fail(kp, f"expected a string, got {_json_type(value)}")
        if choices is not None and value not in choices:
            self.fail(kp, f"must be one of {', '.join(choices)}, got {value!r}")
        return value

    def vector(self, value, keypath, n: int) -> np.ndarray:
        if not isinstance(value, list) or len(value) != n:
            self.fail(keypath, f"expected an array of {n} numbers")
        for i, x in enumerate(value):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                self.fail(keypath + [i], "expected a finite number")
        return np.array(value, dtype=float)

    def field_vector(self, mapping, key, keypath, n: int) -> np.ndarray:
        return self.vector(self.get(mapping, key, keypath), keypath + [key], n)

    def vectors(self, value, keypath, n: int) -> np.ndarray:
        if not isinstance(value, list):
            self.fail(keypath, f"expected an array, got {_json_type(value)}")
        out = np.empty((len(value), n))
        for i, row in enumerate(value):
            out[i] = self.vector(row, keypath + [i], n)
        return out


def _json_type(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    return "object"


def _root(reader: JsonReader) -> dict:
    return reader.obj(reader.data, [])


def _mm(v: float) -> float:
    return float(v) * 1000.0


# --------------------------------------------------------------------------
# poses
# --------------------------------------------------------------------------


def pose_to_dict(t: RigidTransform, frames: bool = True) -> dict:
    doc = {"from_frame": t.from_frame, "to_frame": t.to_frame} if frames else {}
    doc["q"] = t.rotation.tolist()
    doc["p"] = t.translation.tolist()
    return doc


def _read_qp(r: JsonReader, d, kp):
    d = r.obj(d, kp)
    q = r.field_vector(d, "q", kp, 4)
    p = r.field_vector(d, "p", kp, 3)
    if np.linalg.norm(q) < 1e-6:
        r.fail(kp + ["q"], "quaternion has zero norm")
    return q, p


def pose_from_dict(r: JsonReader, d, kp, from_frame=None, to_frame=None) -> RigidTransform:
    """Read ``{from_frame, to_frame, q, p}``; frames may be supplied by the caller instead."""
    d = r.obj(d, kp)
    q, p = _read_qp(r, d, kp)
    src = from_frame if from_frame is not None else r.string(d, "from_frame", kp)
    dst = to_frame if to_frame is not None else r.string(d, "to_frame", kp)
    with r.context(kp):
        return RigidTransform(q, p, src, dst)


def write_pose(path, t: RigidTransform) -> None:
    write_json(path, pose_to_dict(t))


def read_pose(path) -> RigidTransform:
    r = JsonReader(path)
    return pose_from_dict(r, r.data, [])


def write_poses(path, poses, from_frame=None, to_frame=None) -> None:
    """Pose list sharing one pair of frames: ``{from_frame, to_frame, poses: [{q, p}]}``."""
    poses = list(poses)
    if poses:
        from_frame, to_frame = poses[0].from_frame, poses[0].to_frame
        if any((p.from_frame, p.to_frame) != (from_frame, to_frame) for p in poses):
            raise FormatError("all poses in a pose list must share frames", path)
    if from_frame is None or to_frame is None:
        raise FormatError("an empty pose list needs explicit frames", path)
    write_json(
        path,
        {"from_frame": from_frame, "to_frame": to_frame, "poses": [pose_to_dict(p, False) for p in poses]},
    )


def read_poses(path) -> list:
    r = JsonReader(path)
    d = _root(r)
    src = r.string(d, "from_frame", [])
    dst = r.string(d, "to_frame", [])
    items = r.array(d, "poses", [])
    return [pose_from_dict(r, x, ["poses", i], src, dst) for i, x in enumerate(items)]


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def _rate(times: np.ndarray):
    if len(times) < 2:
        return None
    return float(1.0 / np.median(np.diff(times)))


def trajectory_to_dict(traj: Trajectory, rate_hz=None) -> dict:
    rate = _rate(traj.times) if rate_hz is None else float(rate_hz)
    return {
        "meta": {
            "parent_frame": traj.parent_frame,
            "child_frame": traj.child_frame,
            "rate_hz": rate,
            "units": TRAJECTORY_UNITS,
            "quat": QUAT_CONVENTION,
        },
        "samples": [
            {"t": float(t), "q": q.tolist(), "p": p.tolist()}
            for t, q, p in zip(traj.times, traj.quats, traj.translations)
        ],
    }


def write_trajectory(path, traj: Trajectory, rate_hz=None) -> None:
    write_json(path, trajectory_to_dict(traj, rate_hz))


def read_trajectory(path) -> Trajectory:
    r = JsonReader(path)
    d = _root(r)
    meta = r.obj(r.get(d, "meta", []), ["meta"])
    parent = r.string(meta, "parent_frame", ["meta"])
    child = r.string(meta, "child_frame", ["meta"])
    r.string(meta, "units", ["meta"], choices=(TRAJECTORY_UNITS,))
    r.string(meta, "quat", ["meta"], choices=(QUAT_CONVENTION,))
    if meta.get("rate_hz") is not None:
        r.number(meta, "rate_hz", ["meta"], positive=True)
    samples = r.array(d, "samples", [])
    n = len(samples)
    times = np.empty(n)
    quats = np.empty((n, 4))
    trans = np.empty((n, 3))
    for i, s in enumerate(samples):
        kp = ["samples", i]
        s = r.obj(s, kp)
        times[i] = r.number(s, "t", kp)
        quats[i], trans[i] = _read_qp(r, s, kp)
        if i and times[i] <= times[i - 1]:
            r.fail(kp + ["t"], "timestamps must be strictly increasing")
    with r.context(["samples"]):
        return Trajectory(parent, child, times, quats, trans)


# --------------------------------------------------------------------------
# point clouds, observations, cameras
# --------------------------------------------------------------------------


def write_point_cloud(path, cloud: PointCloud) -> None:
    write_json(path, {"frame": cloud.frame, "points": cloud.points.tolist()})


def read_point_cloud(path) -> PointCloud:
    r = JsonReader(path)
    d = _root(r)
    frame = r.string(d, "frame", [])
    pts = r.vectors(r.get(d, "points", []), ["points"], 3)
    with r.context(["points"]):
        return PointCloud(pts, frame)


def write_observations(path, observations) -> None:
    write_json(
        path,
        {
            "observations": [
                {"base_to_hand": pose_to_dict(o.base_to_hand), "hand_eye_chain": pose_to_dict(o.hand_eye_chain)}
                for o in observations
            ]
        },
    )


def read_observations(path) -> list:
    r = JsonReader(path)
    d = _root(r)
    out = []
    for i, o in enumerate(r.array(d, "observations", [])):
        kp = ["observations", i]
        o = r.obj(o, kp)
        hand = pose_from_dict(r, r.get(o, "base_to_hand", kp), kp + ["base_to_hand"])
        chain = pose_from_dict(r, r.get(o, "hand_eye_chain", kp), kp + ["hand_eye_chain"])
        out.append(HandEyeObservation(hand, chain))
    return out


def write_camera(path, cam: PinholeCamera) -> None:
    write_json(
        path,
        {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height},
    )


def read_camera(path) -> PinholeCamera:
    r = JsonReader(path)
    d = _root(r)
    vals = {k: r.number(d, k, []) for k in ("fx", "fy", "cx", "cy")}
    size = {k: r.integer(d, k, [], minimum=1) for k in ("width", "height")}
    with r.context([]):
        return PinholeCamera(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]), **size)


# --------------------------------------------------------------------------
# meshes (ASCII PLY subset)
# --------------------------------------------------------------------------

_PLY_FLOAT = {"float", "double", "float32", "float64"}
_PLY_COUNT = {"uchar", "uint8", "char", "int8", "ushort", "uint16", "short", "int16", "int", "int32", "uint", "uint32"}
_PLY_INDEX = {"int", "int32", "uint", "uint32", "short", "int16", "ushort", "uint16"}


def write_ply(path, mesh: TriangleMesh) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path, frame: str = "mesh") -> TriangleMesh:
    """Read an ASCII PLY holding only ``x y z`` vertices and triangle faces."""
    path = str(path)
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None
    except IsADirectoryError:
        raise FormatError("expected a file, found a directory", path) from None
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("not an ASCII PLY file", path, 1) from None
    lines = text.splitlines()

    def fail(lineno, msg):
        raise FormatError(msg, path, lineno)

    if not lines or lines[0].strip() != "ply":
        fail(1, "missing 'ply' magic line")
    elements = []  # (name, count, [properties], line)
    i = 1
    fmt_seen = False
    while True:
        if i >= len(lines):
            fail(i, "header ends without 'end_header'")
        tok = lines[i].split()
        lineno = i + 1
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                fail(lineno, f"unsupported format {' '.join(tok[1:])!r}; only 'ascii 1.0' is read")
            fmt_seen = True
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                fail(lineno, "malformed element line")
            if tok[1] not in ("vertex", "face"):
                fail(lineno, f"unsupported element {tok[1]!r}")
            if any(e[0] == tok[1] for e in elements):
                fail(lineno, f"duplicate element {tok[1]!r}")
            elements.append((tok[1], int(tok[2]), [], lineno))
        elif tok[0] == "property":
            if not elements:
                fail(lineno, "property before any element")
            name, _, props, _ = elements[-1]
            if name == "vertex":
                if len(tok) != 3 or tok[1] not in _PLY_FLOAT:
                    fail(lineno, "vertex properties must be 'property float <x|y|z>'")
                expected = "xyz"[len(props)] if len(props) < 3 else None
                if tok[2] != expected:
                    fail(lineno, f"unexpected vertex property {tok[2]!r}; only x, y, z are supported")
            else:
                if (
                    len(tok) != 5
                    or tok[1] != "list"
                    or tok[2] not in _PLY_COUNT
                    or tok[3] not in _PLY_INDEX
                    or tok[4] not in ("vertex_indices", "vertex_index")
                    or props
                ):
                    fail(lineno, "face element must have exactly one 'property list <count> <int> vertex_indices'")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            fail(lineno, f"unknown header keyword {tok[0]!r}")
    if not fmt_seen:
        fail(i, "header has no 'format' line")
    by_name = {e[0]: e for e in elements}
    if "vertex" not in by_name:
        fail(i, "no vertex element")
    if len(by_name["vertex"][2]) != 3:
        fail(by_name["vertex"][3], "vertex element must define x, y and z")
    if "face" in by_name and not by_name["face"][2]:
        fail(by_name["face"][3], "face element has no vertex_indices property")

    vertices = None
    faces = np.empty((0, 3), dtype=np.int64)
    for name, count, _, _ in elements:
        if name == "vertex":
            vertices = np.empty((count, 3))
        else:
            faces = np.empty((count, 3), dtype=np.int64)
        for k in range(count):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                fail(len(lines), f"file ends before {count} {name} rows were read")
            tok = lines[i].split()
            lineno = i + 1
            i += 1
            if name == "vertex":
                if len(tok) != 3:
                    fail(lineno, f"vertex row needs 3 values, got {len(tok)}")
                try:
                    vertices[k] = [float(x) for x in tok]
                except ValueError:
                    fail(lineno, "vertex row contains a non-numeric value")
                if not np.all(np.isfinite(vertices[k])):
                    fail(lineno, "vertex coordinates must be finite")
            else:
                if not tok or not tok[0].isdigit():
                    fail(lineno, "face row must start with a vertex count")
                if int(tok[0]) != 3:
                    fail(lineno, f"only triangles are supported, face has {tok[0]} vertices")
                if len(tok) != 4:
                    fail(lineno, f"face row declares 3 indices but has {len(tok) - 1}")
                try:
                    faces[k] = [int(x) for x in tok[1:]]
                except ValueError:
                    fail(lineno, "face indices must be integers")
                if faces[k].min() < 0 or faces[k].max() >= len(vertices):
                    fail(lineno, f"face index out of range (mesh has {len(vertices)} vertices)")
    while i < len(lines):
        if lines[i].strip():
            fail(i + 1, "unexpected data after the last element")
        i += 1
    try:
        return TriangleMesh(vertices, faces, frame)
    except RigAnnotateError as e:
        raise FormatError(str(e), path, by_name.get("face", by_name["vertex"])[3]) from None


# --------------------------------------------------------------------------
# images (binary PGM)
# --------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray, maxval: int) -> None:
    """Binary P5 PGM; 16-bit samples are big-endian."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must lie in [1, 65535]")
    if image.size and (image.min() < 0 or image.max() > maxval):
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    dtype = ">u1" if maxval < 256 else ">u2"
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    path = str(path)
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None
    pos = 0
    tokens = []
    line = 1
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            line += data[pos : pos + 1] == b"\n"
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path, line)
        tokens.append((data[start:pos], line))
    if tokens[0][0] != b"P5":
        raise FormatError("not a binary PGM (expected magic 'P5')", path, 1)
    vals = []
    for tok, ln in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"header field {tok!r} is not a positive integer", path, ln)
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise FormatError("PGM size must be positive and maxval in [1, 65535]", path, tokens[3][1])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", path, tokens[3][1])
    pos += 1
    dtype = np.dtype(">u1" if maxval < 256 else ">u2")
    need = width * height * dtype.itemsize
    body = data[pos:]
    if len(body) != need:
        raise FormatError(f"pixel data has {len(body)} bytes, expected {need}", path, tokens[3][1] + 1)
    image = np.frombuffer(body, dtype=dtype).reshape(height, width)
    if image.size and image.max() > maxval:
        raise FormatError(f"pixel value exceeds maxval {maxval}", path, tokens[3][1] + 1)
    return image.astype(np.uint8 if maxval < 256 else np.uint16)


def depth_to_pgm(depth: DepthMap) -> np.ndarray:
    """Depth in whole millimeters; invalid pixels become 0.

    Valid depths round to at least 1 mm (0 is reserved) and saturate at
    65535 mm.
    """
    v = depth.values
    mm = np.clip(np.rint(v * DEPTH_SCALE), 1, DEPTH_MAX)
    return np.where(depth.valid, mm, 0).astype(np.uint16)


def write_depth_pgm(path, depth: DepthMap) -> None:
    write_pgm(path, depth_to_pgm(depth), DEPTH_MAX)


def read_depth_pgm(path) -> DepthMap:
    img = read_pgm(path)
    values = img.astype(float) / DEPTH_SCALE
    values[img == 0] = INVALID_DEPTH
    return DepthMap(values)


def write_mask_pgm(path, mask: IdMap) -> None:
    if mask.values.size and mask.values.max() > MASK_MAX:
        raise ValueError(f"8-bit masks hold at most {MASK_MAX} instances")
    write_pgm(path, mask.values, MASK_MAX)


def read_mask_pgm(path) -> IdMap:
    return IdMap(read_pgm(path).astype(np.int64))


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


def write_scene(path, scene: Scene, mesh_refs: dict) -> None:
    """Scene document; ``mesh_refs`` maps object ids to PLY paths relative to the scene file."""
    write_json(
        path,
        {
            "objects": [
                {"object_id": o.object_id, "mesh_ref": mesh_refs[o.object_id], "pose": pose_to_dict(o.pose)}
                for o in scene.objects
            ]
        },
    )


def read_scene(path) -> Scene:
    r = JsonReader(path)
    d = _root(r)
    base = Path(path).parent
    objects = []
    for i, o in enumerate(r.array(d, "objects", [])):
        kp = ["objects", i]
        o = r.obj(o, kp)
        oid = r.string(o, "object_id", kp)
        ref = r.string(o, "mesh_ref", kp)
        pose = pose_from_dict(r, r.get(o, "pose", kp), kp + ["pose"])
        mesh_path = base / ref
        if not mesh_path.is_file():
            r.fail(kp + ["mesh_ref"], f"referenced mesh {ref!r} does not exist")
        mesh = read_ply(mesh_path, pose.from_frame)
        objects.append(SceneObject(oid, mesh, pose))
    with r.context(["objects"]):
        return Scene(objects)


# --------------------------------------------------------------------------
# calibration, sync and annotation results
# --------------------------------------------------------------------------


def write_pivot_result(path, res: PivotResult, frames=("PB", "TB")) -> None:
    write_json(
        path,
        {
            "tool_frame": frames[0],
            "base_frame": frames[1],
            "tip_offset": res.tip_offset.tolist(),
            "pivot_point": res.pivot_point.tolist(),
            "rmse_mm": _mm(res.rmse),
            "condition_number": float(res.condition_number),
        },
    )


def read_pivot_result(path) -> PivotResult:
    r = JsonReader(path)
    d = _root(r)
    tip = r.field_vector(d, "tip_offset", [], 3)
    pivot = r.field_vector(d, "pivot_point", [], 3)
    rmse = r.number(d, "rmse_mm", [], minimum=0.0) / 1000.0
    cond = r.number(d, "condition_number", [], default=math.nan, nullable=True)
    return PivotResult(tip, pivot, rmse, cond)


def read_tip_offset(path) -> np.ndarray:
    r = JsonReader(path)
    return r.field_vector(_root(r), "tip_offset", [], 3)


def write_handeye_result(path, res: HandEyeResult) -> None:
    write_json(
        path,
        {
            "x": pose_to_dict(res.x),
            "trans_residual_rmse_mm": _mm(res.trans_residual_rmse),
            "rot_residual_rmse_deg": float(res.rot_residual_rmse),
            "per_frame_errors": [[_mm(t), float(a)] for t, a in res.per_frame_errors],
        },
    )


def read_handeye_result(path) -> HandEyeResult:
    r = JsonReader(path)
    d = _root(r)
    x = pose_from_dict(r, r.get(d, "x", []), ["x"])
    t = r.number(d, "trans_residual_rmse_mm", [], minimum=0.0) / 1000.0
    a = r.number(d, "rot_residual_rmse_deg", [], minimum=0.0)
    errs = r.vectors(r.array(d, "per_frame_errors", [], default=[]), ["per_frame_errors"], 2)
    return HandEyeResult(x, t, a, [(e[0] / 1000.0, e[1]) for e in errs])


def read_hand_eye(path) -> RigidTransform:
    """Hand-eye transform from either a bare pose file or a hand-eye result file."""
    r = JsonReader(path)
    d = _root(r)
    if "x" in d:
        return pose_from_dict(r, d["x"], ["x"])
    return pose_from_dict(r, d, [])


def write_sync_result(path, res: SyncResult) -> None:
    write_json(
        path,
        {
            "offset_s": float(res.offset),
            "residual_mm": _mm(res.residual),
            "iterations": int(res.iterations),
            "converged": bool(res.converged),
            "method": res.method,
        },
    )


def read_sync_result(path) -> SyncResult:
    r = JsonReader(path)
    d = _root(r)
    return SyncResult(
        r.number(d, "offset_s", []),
        r.number(d, "residual_mm", [], minimum=0.0) / 1000.0,
        r.integer(d, "iterations", [], minimum=0),
        r.boolean(d, "converged", []),
        r.string(d, "method", [], choices=("icp", "brute_force")),
    )


def annotation_to_dict(a: ObjectAnnotation) -> dict:
    return {
        "object_id": a.object_id,
        "mesh_ref": a.mesh_ref,
        "pose": pose_to_dict(a.pose),
        "correspondence_rmse_mm": _mm(a.correspondence_rmse),
        "icp_rmse_mm": _mm(a.icp_rmse),
        "point_count": int(a.point_count),
        "method": a.method,
    }


def annotation_from_dict(r: JsonReader, d, kp) -> ObjectAnnotation:
    d = r.obj(d, kp)
    return ObjectAnnotation(
        r.string(d, "object_id", kp),
        r.string(d, "mesh_ref", kp),
        pose_from_dict(r, r.get(d, "pose", kp), kp + ["pose"]),
        r.number(d, "correspondence_rmse_mm", kp, minimum=0.0, nullable=True) / 1000.0,
        r.number(d, "icp_rmse_mm", kp, minimum=0.0) / 1000.0,
        r.integer(d, "point_count", kp, minimum=0),
        r.string(d, "method", kp, choices=("robot", "tracker")),
    )


def write_object_annotation(path, a: ObjectAnnotation) -> None:
    write_json(path, annotation_to_dict(a))


def read_object_annotation(path) -> ObjectAnnotation:
    r = JsonReader(path)
    return annotation_from_dict(r, r.data, [])


# --------------------------------------------------------------------------
# error budget
# --------------------------------------------------------------------------


def stage_to_dict(s: ErrorStage) -> dict:
    doc = {
        "name": s.name,
        "trans_rmse_mm": _mm(s.trans_rmse),
        "rot_rmse_deg": float(s.rot_rmse),
        "lever_arm_m": float(s.lever_arm),
    }
    if s.dynamic_trans_rmse is not None:
        doc["dynamic_trans_rmse_mm"] = _mm(s.dynamic_trans_rmse)
    if s.dynamic_rot_rmse is not None:
        doc["dynamic_rot_rmse_deg"] = float(s.dynamic_rot_rmse)
    return doc


def stage_from_dict(r: JsonReader, d, kp) -> ErrorStage:
    d = r.obj(d, kp)
    dyn_t = r.number(d, "dynamic_trans_rmse_mm", kp, default=None, minimum=0.0)
    dyn_r = r.number(d, "dynamic_rot_rmse_deg", kp, default=None, minimum=0.0)
    return ErrorStage(
        r.string(d, "name", kp),
        r.number(d, "trans_rmse_mm", kp, minimum=0.0) / 1000.0,
        r.number(d, "rot_rmse_deg", kp, minimum=0.0),
        r.number(d, "lever_arm_m", kp, default=0.0, minimum=0.0),
        None if dyn_t is None else dyn_t / 1000.0,
        dyn_r,
    )


def write_stages(path, stages) -> None:
    write_json(path, {"stages": [stage_to_dict(s) for s in stages]})


def read_stages(path) -> list:
    r = JsonReader(path)
    d = _root(r)
    return [stage_from_dict(r, s, ["stages", i]) for i, s in enumerate(r.array(d, "stages", []))]


def budget_to_dict(b: ErrorBudget) -> dict:
    return {
        "stages": [stage_to_dict(s) for s in b.stages],
        "lower_mm": _mm(b.lower_bound),
        "upper_mm": _mm(b.upper_bound),
    }


def budget_from_dict(r: JsonReader, d, kp) -> ErrorBudget:
    d = r.obj(d, kp)
    stages = [stage_from_dict(r, s, kp + ["stages", i]) for i, s in enumerate(r.array(d, "stages", kp))]
    lower = r.number(d, "lower_mm", kp, minimum=0.0) / 1000.0
    upper = r.number(d, "upper_mm", kp, minimum=0.0) / 1000.0
    if lower > upper:
        r.fail(kp + ["lower_mm"], "lower bound exceeds upper bound")
    return ErrorBudget(stages, lower, upper)


def write_budget(path, b: ErrorBudget) -> None:
    write_json(path, budget_to_dict(b))


def read_budget(path) -> ErrorBudget:
    r = JsonReader(path)
    return budget_from_dict(r, r.data, [])


# --------------------------------------------------------------------------
# annotation file
# --------------------------------------------------------------------------


def write_annotation_file(path, objects, camera_trajectory_ref, budget: ErrorBudget | None) -> None:
    """Per-scene annotation document; references are relative to its directory."""
    write_json(
        path,
        {
            "objects": [annotation_to_dict(a) for a in objects],
            "camera_trajectory_ref": camera_trajectory_ref,
            "error_budget": None if budget is None else budget_to_dict(budget),
        },
    )


def read_annotation_file(path):
    """Returns ``(objects, camera_trajectory_path or None, budget or None)``.

    Every referenced mesh and trajectory file must exist.
    """
    r = JsonReader(path)
    d = _root(r)
    base = Path(path).parent
    objects = []
    for i, o in enumerate(r.array(d, "objects", [])):
        a = annotation_from_dict(r, o, ["objects", i])
        if a.mesh_ref and not (base / a.mesh_ref).is_file():
            r.fail(["objects", i, "mesh_ref"], f"referenced mesh {a.mesh_ref!r} does not exist")
        objects.append(a)
    ref = r.get(d, "camera_trajectory_ref", [], default=None)
    traj_path = None
    if ref is not None:
        ref = r.string(d, "camera_trajectory_ref", [])
        traj_path = base / ref
        if not traj_path.is_file():
            r.fail(["camera_trajectory_ref"], f"referenced trajectory {ref!r} does not exist")
    budget = d.get("error_budget")
    if budget is not None:
        budget = budget_from_dict(r, budget, ["error_budget"])
    return objects, traj_path, budget


# --------------------------------------------------------------------------
# session configuration
# --------------------------------------------------------------------------

_NOISE_FIELDS = ("static_noise", "dynamic_noise")


def config_to_dict(cfg: SessionConfig) -> dict:
    doc = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "hand_eye":
            v = pose_to_dict(v, False)
        elif f.name in _NOISE_FIELDS:
            v = {"sigma_t": v.sigma_t, "sigma_r_deg": v.sigma_r}
        elif f.name == "tip_offset":
            v = list(v)
        doc[f.name] = v
    return doc


def read_config(path) -> SessionConfig:
    """Session configuration; every field is optional and defaults as in :class:`SessionConfig`."""
    r = JsonReader(path)
    d = _root(r)
    known = {f.name: f for f in fields(SessionConfig)}
    for key in d:
        if key not in known:
            r.fail([key], "unknown configuration field")
    kw = {}
    defaults = SessionConfig()
    for name in d:
        kp = [name]
        default = getattr(defaults, name)
        if name == "method":
            kw[name] = r.string(d, name, [], choices=("robot", "tracker"))
        elif name == "hand_eye":
            q, p = _read_qp(r, d[name], kp)
            with r.context(kp):
                kw[name] = RigidTransform(q, p, default.from_frame, default.to_frame)
        elif name in _NOISE_FIELDS:
            if d[name] is None:
                kw[name] = None
                continue
            n = r.obj(d[name], kp)
            with r.context(kp):
                kw[name] = NoiseModel(
                    r.number(n, "sigma_t", kp, minimum=0.0), r.number(n, "sigma_r_deg", kp, minimum=0.0)
                )
        elif name == "tip_offset":
            kw[name] = tuple(r.vector(d[name], kp, 3).tolist())
        elif isinstance(default, bool):
            kw[name] = r.boolean(d, name, [])
        elif isinstance(default, int):
            kw[name] = r.integer(d, name, [])
        else:
            kw[name] = r.number(d, name, [])
    with r.context([]):
        return SessionConfig(**kw)


def write_config(path, cfg: SessionConfig) -> None:
    write_json(path, config_to_dict(cfg))
