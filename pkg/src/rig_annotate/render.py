"""Ground-truth depth and instance-mask rendering by ray casting.

Camera axes are x right, y down, z forward; rays pass through pixel centers
``(u + 0.5, v + 0.5)``. Depth is the hit point's z in the camera frame (not
the ray length). Misses get depth ``INVALID_DEPTH`` and id ``BACKGROUND_ID``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import os

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip the TBB probe, which warns on older system TBB builds
    try:
        import numba.np.ufunc.omppool  # noqa: F401

        numba.config.THREADING_LAYER = "omp"
    except ImportError:
        numba.config.THREADING_LAYER = "workqueue"

from ._threads import thread_count
from .errors import EmptyScene, FrameMismatch, InvalidGeometry
from .geom import RigidTransform
from .registration import TriangleMesh

INVALID_DEPTH = 0.0
BACKGROUND_ID = 0
LEAF_SIZE = 4
# barycentric slack so rays through shared edges/vertices never slip between triangles
BARY_EPS = 1e-10
DET_EPS = 1e-14
T_MIN = 1e-9


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidGeometry("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidGeometry("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidGeometry("principal point must lie inside the image")

    def pixel_directions(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape ``(H, W, 3)``."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    mesh: TriangleMesh
    pose: RigidTransform  # mesh frame -> base frame


@dataclass(frozen=True)
class Scene:
    objects: tuple

    def __init__(self, objects: Sequence[SceneObject]):
        objects = tuple(objects)
        ids = [o.object_id for o in objects]
        if len(set(ids)) != len(ids):
            raise InvalidGeometry("scene object ids must be unique")
        bases = {o.pose.to_frame for o in objects}
        if len(bases) > 1:
            raise FrameMismatch(f"scene objects are posed in different base frames: {sorted(bases)}")
        for o in objects:
            if o.pose.from_frame != o.mesh.frame:
                raise FrameMismatch(f"{o.object_id}: pose starts at {o.pose.from_frame}, mesh is in {o.mesh.frame}")
        object.__setattr__(self, "objects", objects)

    @property
    def base_frame(self):
        return self.objects[0].pose.to_frame if self.objects else None

    def instance_id(self, object_id: str) -> int:
        """1-based mask id of an object (scene order)."""
        for i, o in enumerate(self.objects):
            if o.object_id == object_id:
                return i + 1
        raise KeyError(object_id)

    def triangles(self):
        """World-space triangles ``(M, 3, 3)`` and the owning object index per triangle."""
        tris, owner = [], []
        for i, o in enumerate(self.objects):
            v = o.pose.apply(o.mesh.vertices)
            tris.append(v[o.mesh.triangles])
            owner.append(np.full(len(o.mesh.triangles), i, dtype=np.int64))
        if not tris:
            return np.empty((0, 3, 3)), np.empty(0, dtype=np.int64)
        return np.concatenate(tris), np.concatenate(owner)


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (H, W) meters, INVALID_DEPTH on miss

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values != INVALID_DEPTH


@dataclass(frozen=True, eq=False)
class IdMap:
    values: np.ndarray  # (H, W) instance ids, BACKGROUND_ID on miss


# --------------------------------------------------------------------------
# BVH
# --------------------------------------------------------------------------


class AccelStructure:
    """Flattened axis-aligned BVH over world-space triangles.

    Node ``i`` is a leaf when ``count[i] > 0``; it then covers
    ``order[first[i]:first[i] + count[i]]``. Inner nodes store their two
    children in ``first`` (left) and ``right``.
    """

    def __init__(self, triangles: np.ndarray, owner: np.ndarray):
        self.triangles = np.ascontiguousarray(triangles, dtype=np.float64)
        self.owner = np.ascontiguousarray(owner, dtype=np.int64)
        n = len(self.triangles)
        lo = self.triangles.min(axis=1)
        hi = self.triangles.max(axis=1)
        centroid = self.triangles.mean(axis=1)
        order = np.arange(n, dtype=np.int64)
        bmin, bmax, first, right, count = [], [], [], [], []

        def new_node(idx):
            bmin.append(lo[idx].min(axis=0))
            bmax.append(hi[idx].max(axis=0))
            first.append(0)
            right.append(-1)
            count.append(0)
            return len(bmin) - 1

        root_idx = order
        stack = [(new_node(root_idx), 0, n)]
        while stack:
            node, start, stop = stack.pop()
            idx = order[start:stop]
            if stop - start <= LEAF_SIZE:
                first[node] = start
                count[node] = stop - start
                continue
            c = centroid[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            # stable sort keeps the build deterministic under equal centroids
            idx = idx[np.argsort(c[:, axis], kind="stable")]
            order[start:stop] = idx
            mid = start + (stop - start) // 2
            left = new_node(order[start:mid])
            rnode = new_node(order[mid:stop])
            first[node] = left
            right[node] = rnode
            stack.append((rnode, mid, stop))
            stack.append((left, start, mid))

        self.order = order
        node_min = np.array(bmin, dtype=np.float64).reshape(-1, 3)
        node_max = np.array(bmax, dtype=np.float64).reshape(-1, 3)
        # pad boxes so hits accepted through the barycentric slack stay inside them
        pad = 1e-9 * np.max(node_max - node_min, axis=1, keepdims=True) + 1e-12
        self.node_min = node_min - pad
        self.node_max = node_max + pad
        self.node_first = np.array(first, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.node_count = np.array(count, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.node_min)

    def intersect(self, origins, directions):
        """Nearest hits for rays; returns ``(t, triangle_index)`` with ``inf, -1`` on miss."""
        o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
        d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
        o = np.broadcast_to(o, d.shape).copy() if len(o) == 1 else o
        t_out = np.empty(len(d))
        tri_out = np.empty(len(d), dtype=np.int64)
        _set_threads()
        _trace_bvh(
            o, d, self.triangles, self.order, self.node_min, self.node_max,
            self.node_first, self.node_right, self.node_count, t_out, tri_out,
        )
        return t_out, tri_out

    def intersect_exhaustive(self, origins, directions):
        """Same contract as :meth:`intersect`, testing every triangle."""
        o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
        d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
        o = np.broadcast_to(o, d.shape).copy() if len(o) == 1 else o
        t_out = np.empty(len(d))
        tri_out = np.empty(len(d), dtype=np.int64)
        _set_threads()
        _trace_all(o, d, self.triangles, t_out, tri_out)
        return t_out, tri_out


def build_bvh(scene: Scene) -> AccelStructure:
    tris, owner = scene.triangles()
    if len(tris) == 0:
        raise EmptyScene("scene has no triangles")
    return AccelStructure(tris, owner)


def _set_threads():
    numba.set_num_threads(max(1, min(thread_count(), numba.config.NUMBA_NUM_THREADS)))


@numba.njit(cache=True, inline="always")
def _moller_trumbore(ox, oy, oz, dx, dy, dz, tri):
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    e1x, e1y, e1z = tri[1, 0] - ax, tri[1, 1] - ay, tri[1, 2] - az
    e2x, e2y, e2z = tri[2, 0] - ax, tri[2, 1] - ay, tri[2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < DET_EPS:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= T_MIN:
        return np.inf
    return t


@numba.njit(cache=True, inline="always")
def _slab(ox, oy, oz, ix, iy, iz, bmin, bmax):
    """Entry distance of a ray into a box, or inf when missed."""
    t0 = 0.0
    t1 = np.inf
    for k in range(3):
        o = ox if k == 0 else (oy if k == 1 else oz)
        inv = ix if k == 0 else (iy if k == 1 else iz)
        lo = bmin[k]
        hi = bmax[k]
        if inv == np.inf or inv == -np.inf:
            # ray parallel to this slab
            if o < lo or o > hi:
                return np.inf
            continue
        a = (lo - o) * inv
        b = (hi - o) * inv
        if a > b:
            a, b = b, a
        if a > t0:
            t0 = a
        if b < t1:
            t1 = b
        if t0 > t1:
            return np.inf
    return t0


@numba.njit(cache=True, parallel=True)
def _trace_bvh(orig, dirs, tris, order, nmin, nmax, nfirst, nright, ncount, t_out, tri_out):
    for r in numba.prange(len(dirs)):
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best_t = np.inf
        best_i = -1
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # <= keeps equal-distance candidates so the lowest index can win
            entry = _slab(ox, oy, oz, ix, iy, iz, nmin[node], nmax[node])
            if entry == np.inf or entry > best_t * (1.0 + 1e-12):
                continue
            cnt = ncount[node]
            if cnt > 0:
                start = nfirst[node]
                for j in range(start, start + cnt):
                    ti = order[j]
                    t = _moller_trumbore(ox, oy, oz, dx, dy, dz, tris[ti])
                    if t < best_t or (t == best_t and ti < best_i):
                        best_t = t
                        best_i = ti
            else:
                stack[sp] = nright[node]
                sp += 1
                stack[sp] = nfirst[node]
                sp += 1
        t_out[r] = best_t
        tri_out[r] = best_i


@numba.njit(cache=True, parallel=True)
def _trace_all(orig, dirs, tris, t_out, tri_out):
    for r in numba.prange(len(dirs)):
        best_t = np.inf
        best_i = -1
        for ti in range(len(tris)):
            t = _moller_trumbore(orig[r, 0], orig[r, 1], orig[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2], tris[ti])
            if t < best_t:
                best_t = t
                best_i = ti
        t_out[r] = best_t
        tri_out[r] = best_i


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _camera_rays(cam: PinholeCamera, cam_pose: RigidTransform):
    dirs_cam = cam.pixel_directions().reshape(-1, 3)
    dirs = dirs_cam @ cam_pose.rotation_matrix.T
    return cam_pose.translation.reshape(1, 3), dirs


def render(scene: Scene, cam: PinholeCamera, cam_pose: RigidTransform, accel: AccelStructure | None = None):
    """Depth map and instance-id map from one ray-casting pass.

    ``cam_pose`` maps camera coordinates into the scene's base frame.
    """
    if not scene.objects:
        raise EmptyScene("scene has no objects")
    if cam_pose.to_frame != scene.base_frame:
        raise FrameMismatch(f"camera pose ends in {cam_pose.to_frame}, scene is in {scene.base_frame}")
    accel = accel or build_bvh(scene)
    origin, dirs = _camera_rays(cam, cam_pose)
    t, tri = accel.intersect(origin, dirs)
    hit = tri >= 0
    # camera-frame direction has unit z, so the ray parameter is the z-depth
    depth = np.where(hit, t, INVALID_DEPTH).reshape(cam.height, cam.width)
    ids = np.where(hit, accel.owner[np.maximum(tri, 0)] + 1, BACKGROUND_ID).reshape(cam.height, cam.width)
    return DepthMap(depth), IdMap(ids.astype(np.int64))


def render_depth(scene: Scene, cam: PinholeCamera, cam_pose: RigidTransform, accel=None) -> DepthMap:
    return render(scene, cam, cam_pose, accel)[0]


def render_instance_mask(scene: Scene, cam: PinholeCamera, cam_pose: RigidTransform, accel=None) -> IdMap:
    return render(scene, cam, cam_pose, accel)[1]
