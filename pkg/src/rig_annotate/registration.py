"""Rigid registration: correspondence fit, nearest-neighbor search and ICP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ._threads import map_chunks
from .errors import (
    DegenerateConfiguration,
    EmptyInput,
    EmptyMesh,
    FrameMismatch,
    InvalidConfig,
    InvalidGeometry,
    NoCorrespondences,
    TooFewPoints,
)
from .geom import FrameId, RigidTransform, matrix_to_quat

MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: FrameId

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidGeometry("point cloud contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        if t.from_frame != self.frame:
            raise FrameMismatch(f"cloud is in {self.frame}, transform starts at {t.from_frame}")
        return PointCloud(t.apply(self.points), t.to_frame)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    frame: FrameId

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidGeometry("mesh vertices contain non-finite coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidGeometry("triangle vertex index out of range")
        if len(f):
            areas = triangle_areas(v, f)
            bad = np.flatnonzero(areas <= MIN_TRIANGLE_AREA)
            if len(bad):
                raise InvalidGeometry(f"degenerate triangle {int(bad[0])} (area {areas[bad[0]]:.3g} m^2)")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def corners(self):
        """Triangle corner arrays ``(a, b, c)``, each ``(M, 3)``."""
        return (
            self.vertices[self.triangles[:, 0]],
            self.vertices[self.triangles[:, 1]],
            self.vertices[self.triangles[:, 2]],
        )

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        if t.from_frame != self.frame:
            raise FrameMismatch(f"mesh is in {self.frame}, transform starts at {t.from_frame}")
        return TriangleMesh(t.apply(self.vertices), self.triangles, t.to_frame)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    rel_change_tol: float = 1e-8
    max_corr_dist: float = 0.05
    trim_fraction: float = 0.1

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise InvalidConfig("max_iterations must be >= 1")
        if not self.rel_change_tol > 0 or not self.max_corr_dist > 0:
            raise InvalidConfig("tolerances must be positive")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise InvalidConfig("trim_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    inlier_count: int
    # trimmed, gate-truncated RMSE at the start and after every iteration
    cost_history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# closed-form fit
# --------------------------------------------------------------------------


def kabsch_fit(src: PointCloud, dst: PointCloud) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto corresponding ``dst``.

    The returned transform goes from ``src.frame`` to ``dst.frame``.
    """
    if len(src) != len(dst):
        raise TooFewPoints(f"correspondence sets differ in size ({len(src)} vs {len(dst)})")
    if len(src) < 3:
        raise TooFewPoints(f"kabsch_fit needs at least 3 correspondences, got {len(src)}")
    rot, trans = _kabsch(src.points, dst.points)
    return RigidTransform(matrix_to_quat(rot), trans, src.frame, dst.frame)


def _kabsch(a: np.ndarray, b: np.ndarray):
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    if s[0] == 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("correspondences are collinear or coincident (rank < 2)")
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0.0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cb - rot @ ca


# --------------------------------------------------------------------------
# nearest neighbors
# --------------------------------------------------------------------------


class SpatialIndex:
    """Exact nearest-neighbor index over a point cloud.

    Ties between equidistant points resolve to the lowest point index.
    """

    _PROBE = 8

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyInput("cannot index an empty point cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def query(self, points):
        """Return ``(distances, indices)`` of the nearest indexed point for each query."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        k = min(self._PROBE, len(self.cloud))
        dist, idx = self._tree.query(pts, k=k)
        dist = dist.reshape(len(pts), k)
        idx = idx.reshape(len(pts), k)
        tie = dist == dist[:, :1]
        best = np.where(tie, idx, np.iinfo(idx.dtype).max).min(axis=1)
        d = dist[:, 0]
        if single:
            return float(d[0]), int(best[0])
        return d, best


def build_kdtree(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


# --------------------------------------------------------------------------
# point to mesh
# --------------------------------------------------------------------------


def _dot(x, y):
    return np.einsum("...k,...k->...", x, y)


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on each triangle ``(a, b, c)`` to ``p`` (broadcasting).

    Voronoi-region walk from Ericson, Real-Time Collision Detection, 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    out = a + ab * v_in[..., None] + ac * w_in[..., None]
    # apply in reverse precedence so earlier regions win
    out = np.where(in_bc[..., None], b + (c - b) * w_bc[..., None], out)
    out = np.where(in_ac[..., None], a + ac * w_ac[..., None], out)
    out = np.where(in_c[..., None], c, out)
    out = np.where(in_ab[..., None], a + ab * v_ab[..., None], out)
    out = np.where(in_b[..., None], b, out)
    out = np.where(in_a[..., None], a, out)
    return out


def _bounding_spheres(mesh: TriangleMesh):
    a, b, c = mesh.corners()
    centers = (a + b + c) / 3.0
    radii = np.max(
        np.stack([np.linalg.norm(x - centers, axis=1) for x in (a, b, c)]), axis=0
    )
    return centers, radii


def closest_points_on_mesh(mesh: TriangleMesh, points):
    """Vectorized :func:`closest_point_on_mesh` for an ``(N, 3)`` array.

    Returns ``(points, distances, triangle_indices)``. Triangles whose
    bounding sphere cannot beat the best upper bound are skipped; the result
    is the same as testing every triangle.
    """
    if len(mesh.triangles) == 0:
        raise EmptyMesh("mesh has no triangles")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    a, b, c = mesh.corners()
    centers, radii = _bounding_spheres(mesh)
    chunk = max(1, 1_000_000 // len(a))

    def work(start, stop):
        q = pts[start:stop]
        to_center = np.linalg.norm(q[:, None, :] - centers[None], axis=2)
        upper = np.min(to_center + radii, axis=1)
        lower = to_center - radii
        pi, ti = np.nonzero(lower <= (upper * (1.0 + 1e-9) + 1e-12)[:, None])
        cand = closest_points_on_triangles(q[pi], a[ti], b[ti], c[ti])
        d2 = np.sum((cand - q[pi]) ** 2, axis=-1)
        order = np.lexsort((ti, d2, pi))
        first = order[np.r_[True, pi[order][1:] != pi[order][:-1]]]
        return cand[first], np.sqrt(d2[first]), ti[first]

    parts = map_chunks(work, len(pts), chunk)
    if not parts:
        return np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.int64)
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def closest_point_on_mesh(mesh: TriangleMesh, p):
    """Exact closest surface point to ``p``; ties go to the lowest triangle index."""
    pt, dist, tri = closest_points_on_mesh(mesh, np.asarray(p, dtype=float).reshape(1, 3))
    return pt[0], float(dist[0]), int(tri[0])


# --------------------------------------------------------------------------
# ICP
# --------------------------------------------------------------------------


def _correspond(target, pts):
    if isinstance(target, TriangleMesh):
        matched, dist, _ = closest_points_on_mesh(target, pts)
        return matched, dist
    dist, idx = target.query(pts)
    return target.cloud.points[idx], dist


def _trimmed_cost(dist, keep, gate):
    """Mean of the ``keep`` smallest gate-truncated squared residuals, and the inlier mask."""
    order = np.argsort(dist, kind="stable")[:keep]
    truncated = np.minimum(dist[order] ** 2, gate * gate)
    mask = np.zeros(len(dist), dtype=bool)
    mask[order[dist[order] <= gate]] = True
    return float(np.mean(truncated)), mask


def icp(src: PointCloud, target, init: RigidTransform, params: IcpParams | None = None) -> RegistrationResult:
    """Point-to-point ICP of ``src`` against a mesh or point cloud.

    The minimized objective is the mean of the ``ceil((1 - trim_fraction) N)``
    smallest squared residuals, each truncated at ``max_corr_dist**2``. Both
    the correspondence step and the Kabsch refit can only lower it, so the
    recorded ``cost_history`` is non-increasing. Plain ICP steps are
    extrapolated with Anderson acceleration (window 5); an extrapolated
    step is kept only when it beats the plain step, which preserves the
    monotonicity. ``rmse`` in the result is taken over the final inliers
    only (kept and inside the gate).
    """
    params = params or IcpParams()
    if len(src) < 3:
        raise TooFewPoints(f"icp needs at least 3 source points, got {len(src)}")
    if isinstance(target, PointCloud):
        target_frame = target.frame
        target = build_kdtree(target)
    elif isinstance(target, SpatialIndex):
        target_frame = target.cloud.frame
    elif isinstance(target, TriangleMesh):
        target_frame = target.frame
        if len(target.triangles) == 0:
            raise EmptyMesh("icp target mesh has no triangles")
    else:
        raise TypeError(f"unsupported icp target {type(target).__name__}")
    if init.from_frame != src.frame or init.to_frame != target_frame:
        raise FrameMismatch(
            f"init maps {init.from_frame}->{init.to_frame}, expected {src.frame}->{target_frame}"
        )

    n = len(src)
    keep = min(n, max(3, math.ceil((1.0 - params.trim_fraction) * n - 1e-9)))
    gate = params.max_corr_dist
    pts = src.points
    rot0 = init.rotation_matrix
    trans0 = init.translation

    # iterates are 6-vectors (rotation vector, translation) of the update
    # applied on top of ``init``, so they stay small and never wrap
    def to_pose(x):
        d_rot = Rotation.from_rotvec(x[:3]).as_matrix()
        return d_rot @ rot0, d_rot @ trans0 + x[3:]

    def to_vec(rot, trans):
        d_rot = rot @ rot0.T
        return np.concatenate([Rotation.from_matrix(d_rot).as_rotvec(), trans - d_rot @ trans0])

    def evaluate(x):
        rot, trans = to_pose(x)
        matched, dist = _correspond(target, pts @ rot.T + trans)
        cost, mask = _trimmed_cost(dist, keep, gate)
        return _State(x, rot, trans, matched, dist, cost, mask)

    state = evaluate(np.zeros(6))
    history = [math.sqrt(state.cost)]
    g_hist: list = []
    f_hist: list = []
    iterations = 0
    for _ in range(params.max_iterations):
        if state.mask.sum() < 3:
            raise NoCorrespondences(f"only {int(state.mask.sum())} correspondences inside the {gate} m gate")
        g = to_vec(*_kabsch(pts[state.mask], state.matched[state.mask]))
        iterations += 1
        plain = evaluate(g)
        g_hist.append(g)
        f_hist.append(g - state.x)
        del g_hist[:-_ANDERSON_WINDOW - 1], f_hist[:-_ANDERSON_WINDOW - 1]
        nxt = plain
        if len(f_hist) > 1:
            d_f = np.diff(np.array(f_hist), axis=0).T
            d_g = np.diff(np.array(g_hist), axis=0).T
            gamma = np.linalg.lstsq(d_f, f_hist[-1], rcond=None)[0]
            accel = g - d_g @ gamma
            if np.all(np.isfinite(accel)) and np.linalg.norm(accel[:3]) < np.pi:
                trial = evaluate(accel)
                if trial.cost < plain.cost:
                    nxt = trial
            if nxt is plain:
                g_hist, f_hist = [g], [g - state.x]
        if nxt.cost > state.cost:
            # round-off only; a plain step cannot raise the objective in exact arithmetic
            history.append(math.sqrt(state.cost))
            break
        prev_rmse = math.sqrt(state.cost)
        state = nxt
        rmse_now = math.sqrt(state.cost)
        history.append(rmse_now)
        if rmse_now == 0.0 or (prev_rmse - rmse_now) <= params.rel_change_tol * prev_rmse:
            break

    if state.mask.sum() == 0:
        raise NoCorrespondences("all correspondences gated out")
    rmse = float(np.sqrt(np.mean(state.dist[state.mask] ** 2)))
    transform = RigidTransform(matrix_to_quat(state.rot), state.trans, src.frame, target_frame)
    return RegistrationResult(transform, rmse, iterations, int(state.mask.sum()), history)


_ANDERSON_WINDOW = 5


@dataclass
class _State:
    x: np.ndarray
    rot: np.ndarray
    trans: np.ndarray
    matched: np.ndarray
    dist: np.ndarray
    cost: float
    mask: np.ndarray
