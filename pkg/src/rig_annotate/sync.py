"""Time-offset estimation between two pose streams.

Each stream is reduced to a distance curve: cumulative translational arc
length ``d(t)`` on a uniform time grid. The offset is the shift along the
time axis that best overlays curve B on curve A, estimated either by a 1-D
ICP (point-to-line matching, shift-only update) or by an exhaustive search
over whole grid steps used as an oracle.

Sign convention: ``offset`` is added to stream B's timestamps to bring them
onto stream A's clock.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    InsufficientOverlap,
    NonPositiveStep,
    NoConvergenceWarning,
    TimestampMismatch,
    TooFewPoses,
)
from .geom import Trajectory

MIN_OVERLAP_FRACTION = 0.25
MAX_ICP_ITERATIONS = 100


@dataclass(frozen=True, eq=False)
class DistanceCurve:
    t: np.ndarray
    d: np.ndarray
    dt: float

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self):
        return list(zip(self.t.tolist(), self.d.tolist()))


@dataclass(frozen=True)
class SyncResult:
    offset: float  # s, add to stream B timestamps
    residual: float  # m, RMSE of d over the overlap after alignment
    iterations: int
    converged: bool = True
    method: str = "icp"


def _moving_average(x: np.ndarray, half: int) -> np.ndarray:
    """Moving average over ``2 * half + 1`` samples.

    Near the ends the window keeps its length and slides inward, so the
    first sample (the arc-length origin) is averaged as strongly as the rest.
    """
    n = len(x)
    width = min(2 * half + 1, n)
    if width <= 1:
        return x
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    start = np.clip(np.arange(n) - half, 0, n - width)
    return (csum[start + width] - csum[start]) / width


def distance_curve(traj: Trajectory, dt: float, smooth: float = 0.0) -> DistanceCurve:
    """Cumulative arc length of the trajectory's positions on a ``dt`` grid.

    ``smooth`` (seconds) optionally averages positions over a window of
    that length before measuring length. Per-sample white noise inflates arc
    length by roughly ``sigma**2 / step`` each step, so noisy streams need
    it; the default leaves positions untouched.
    """
    if not dt > 0:
        raise NonPositiveStep(f"grid step must be positive, got {dt}")
    if len(traj) < 2:
        raise TooFewPoses("distance curve needs at least 2 samples")
    t0 = traj.times[0]
    n = int(math.floor((traj.times[-1] - t0) / dt + 1e-9)) + 1
    grid = t0 + dt * np.arange(n)
    grid[-1] = min(grid[-1], traj.times[-1])
    pos = np.column_stack([np.interp(grid, traj.times, traj.translations[:, k]) for k in range(3)])
    pos = _moving_average(pos, int(round(smooth / (2.0 * dt))))
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    d = np.concatenate([[0.0], np.cumsum(steps)])
    return DistanceCurve(grid, d, float(dt))


def _check_pair(a: DistanceCurve, b: DistanceCurve, max_offset: float):
    if not max_offset > 0:
        raise NonPositiveStep(f"max_offset must be positive, got {max_offset}")
    if abs(a.dt - b.dt) > 1e-9 * max(a.dt, b.dt):
        raise TimestampMismatch(f"curves use different grid steps ({a.dt} vs {b.dt})")
    if len(a) < 2 or len(b) < 2:
        raise TooFewPoses("distance curves need at least 2 samples")


def _overlap(a: DistanceCurve, tb: np.ndarray) -> np.ndarray:
    return (tb >= a.t[0]) & (tb <= a.t[-1])


def _min_overlap(a: DistanceCurve, b: DistanceCurve) -> int:
    return max(2, int(math.ceil(MIN_OVERLAP_FRACTION * min(len(a), len(b)))))


def _residual(a: DistanceCurve, b: DistanceCurve, shift: float):
    tb = b.t + shift
    mask = _overlap(a, tb)
    if not mask.any():
        return math.inf, 0
    diff = b.d[mask] - np.interp(tb[mask], a.t, a.d)
    return float(np.sqrt(np.mean(diff**2))), int(mask.sum())


def brute_force_offset(a: DistanceCurve, b: DistanceCurve, max_offset: float) -> SyncResult:
    """Exhaustive search over whole grid steps in ``[-max_offset, max_offset]``.

    Equal residuals resolve toward the smaller ``|offset|`` (positive first).
    """
    _check_pair(a, b, max_offset)
    k_max = int(math.floor(max_offset / a.dt + 1e-9))
    need = _min_overlap(a, b)
    best = None
    evaluated = 0
    for k in sorted(range(-k_max, k_max + 1), key=lambda k: (abs(k), -k)):
        shift = k * a.dt
        rmse, count = _residual(a, b, shift)
        if count < need:
            continue
        evaluated += 1
        if best is None or rmse < best[1]:
            best = (shift, rmse)
    if best is None:
        raise InsufficientOverlap(
            f"no shift within +/-{max_offset} s overlaps at least {MIN_OVERLAP_FRACTION:.0%} of the shorter curve"
        )
    return SyncResult(best[0], best[1], evaluated, True, "brute_force")


def _project_on_polyline(pts_a: np.ndarray, tree: cKDTree, q: np.ndarray):
    """Nearest point on curve A's polyline for each query; returns (foot, unit normal)."""
    _, idx = tree.query(q)
    n = len(pts_a)
    best_foot = np.empty_like(q)
    best_normal = np.empty_like(q)
    best_d2 = np.full(len(q), np.inf)
    for lo in (idx - 1, idx):
        lo = np.clip(lo, 0, n - 2)
        p0 = pts_a[lo]
        seg = pts_a[lo + 1] - p0
        length2 = np.sum(seg**2, axis=1)
        u = np.clip(np.sum((q - p0) * seg, axis=1) / length2, 0.0, 1.0)
        foot = p0 + u[:, None] * seg
        d2 = np.sum((q - foot) ** 2, axis=1)
        inv_len = 1.0 / np.sqrt(length2)
        normal = np.column_stack([-seg[:, 1] * inv_len, seg[:, 0] * inv_len])
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_foot[better] = foot[better]
        best_normal[better] = normal[better]
    return best_foot, best_normal


def estimate_offset_icp(
    a: DistanceCurve, b: DistanceCurve, max_offset: float, init: float = 0.0
) -> SyncResult:
    """1-D ICP on the ``(t, d)`` point sets with translation along ``t`` only.

    Each iteration matches every overlapping point of the shifted curve B to
    its nearest point on curve A's polyline and solves the point-to-line
    least-squares problem for a time shift. Iteration stops when the shift
    update drops below ``dt * 1e-3``; hitting the iteration cap returns the
    last estimate with ``converged=False`` and a :class:`NoConvergenceWarning`.
    """
    _check_pair(a, b, max_offset)
    need = _min_overlap(a, b)
    pts_a = np.column_stack([a.t, a.d])
    tree = cKDTree(pts_a)
    shift = float(np.clip(init, -max_offset, max_offset))
    tol = a.dt * 1e-3
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ICP_ITERATIONS + 1):
        tb = b.t + shift
        mask = _overlap(a, tb)
        if mask.sum() < need:
            raise InsufficientOverlap(
                f"shift {shift:.6g} s leaves {int(mask.sum())} overlapping samples, need {need}"
            )
        q = np.column_stack([tb[mask], b.d[mask]])
        foot, normal = _project_on_polyline(pts_a, tree, q)
        r = np.sum((q - foot) * normal, axis=1)
        nt = normal[:, 0]
        denom = float(np.dot(nt, nt))
        step = 0.0 if denom <= 1e-300 else -float(np.dot(r, nt)) / denom
        new_shift = float(np.clip(shift + step, -max_offset, max_offset))
        change = abs(new_shift - shift)
        shift = new_shift
        if change < tol:
            converged = True
            break
    rmse, count = _residual(a, b, shift)
    if count < need:
        raise InsufficientOverlap(f"final shift {shift:.6g} s leaves {count} overlapping samples, need {need}")
    if not converged:
        warnings.warn(
            f"offset ICP hit {MAX_ICP_ITERATIONS} iterations without converging", NoConvergenceWarning, stacklevel=2
        )
    return SyncResult(shift, rmse, iterations, converged, "icp")


def apply_offset(traj: Trajectory, offset: float) -> Trajectory:
    return traj.with_times(traj.times + offset)
