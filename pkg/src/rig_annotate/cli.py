"""Command-line interface.

Exit codes: 0 on success, 1 on a domain error (bad geometry, malformed
file, failed calibration), 2 on a usage error. Diagnostics go to stderr;
results go to the ``--out`` files, or to stdout for ``verify``.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from pathlib import Path

from . import formats
from .annotate import align_background, annotate_camera_trajectory, annotate_object, error_budget
from .calib import handeye_closed_form, handeye_trajectory, pivot_calibrate
from .errors import RigAnnotateError
from .registration import IcpParams
from .render import render
from .sync import brute_force_offset, distance_curve, estimate_offset_icp

_DEFAULTS = IcpParams()


def _add_icp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--icp-max-iter", type=int, default=_DEFAULTS.max_iterations, metavar="N")
    p.add_argument("--icp-tol", type=float, default=_DEFAULTS.rel_change_tol, metavar="X",
                   help="stop when the relative cost change drops below X")
    p.add_argument("--gate", type=float, default=_DEFAULTS.max_corr_dist * 1000.0, metavar="MM",
                   help="correspondence gate in millimeters")
    p.add_argument("--trim", type=float, default=_DEFAULTS.trim_fraction, metavar="FRAC",
                   help="fraction of worst correspondences discarded per iteration")


def _icp_params(args) -> IcpParams:
    return IcpParams(args.icp_max_iter, args.icp_tol, args.gate / 1000.0, args.trim)


def _method_for(frame: str) -> str:
    return "robot" if frame in ("RB", "EE") else "tracker"


def _relref(target, out) -> str:
    """Path of ``target`` relative to the directory holding ``out``."""
    return Path(os.path.relpath(Path(target).resolve(), Path(out).resolve().parent)).as_posix()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_pivot(args) -> int:
    poses = formats.read_poses(args.poses)
    res = pivot_calibrate(poses)
    frames = (poses[0].from_frame, poses[0].to_frame)
    formats.write_pivot_result(args.out, res, frames)
    return 0


def cmd_handeye_closed(args) -> int:
    res = handeye_closed_form(formats.read_observations(args.observations))
    formats.write_handeye_result(args.out, res)
    return 0


def cmd_handeye_traj(args) -> int:
    res = handeye_trajectory(formats.read_trajectory(args.camera), formats.read_trajectory(args.marker))
    formats.write_handeye_result(args.out, res)
    return 0


def cmd_annotate(args) -> int:
    points = formats.read_point_cloud(args.points)
    corr = formats.read_point_cloud(args.correspondences)
    mesh = formats.read_ply(args.mesh, corr.frame)
    ann = annotate_object(
        points,
        mesh,
        corr,
        _icp_params(args),
        object_id=corr.frame,
        mesh_ref=_relref(args.mesh, args.out),
        method=_method_for(points.frame),
    )
    formats.write_object_annotation(args.out, ann)
    return 0


def cmd_background(args) -> int:
    scan = formats.read_point_cloud(args.scan)
    init = formats.read_pose(args.init)
    mesh = formats.read_ply(args.mesh, init.from_frame)
    ann = align_background(
        scan,
        mesh,
        init,
        _icp_params(args),
        object_id=init.from_frame,
        mesh_ref=_relref(args.mesh, args.out),
        method=_method_for(scan.frame),
    )
    formats.write_object_annotation(args.out, ann)
    return 0


def cmd_sync(args) -> int:
    a = distance_curve(formats.read_trajectory(args.a), args.dt, args.smooth)
    b = distance_curve(formats.read_trajectory(args.b), args.dt, args.smooth)
    if args.oracle:
        res = brute_force_offset(a, b, args.max_offset)
    else:
        res = estimate_offset_icp(a, b, args.max_offset)
    formats.write_sync_result(args.out, res)
    return 0


def cmd_camtraj(args) -> int:
    marker = formats.read_trajectory(args.marker)
    traj = annotate_camera_trajectory(marker, formats.read_hand_eye(args.handeye))
    formats.write_trajectory(args.out, traj)
    return 0


def cmd_render(args) -> int:
    scene = formats.read_scene(args.scene)
    cam = formats.read_camera(args.camera)
    pose = formats.read_pose(args.pose)
    depth, mask = render(scene, cam, pose)
    formats.write_depth_pgm(args.depth, depth)
    formats.write_mask_pgm(args.mask, mask)
    return 0


def cmd_sim(args) -> int:
    from .pipeline import simulate_session

    simulate_session(args.out, formats.read_config(args.config))
    return 0


def cmd_budget(args) -> int:
    formats.write_budget(args.out, error_budget(formats.read_stages(args.stages)))
    return 0


def cmd_verify(args) -> int:
    from .pipeline import verify_session

    report = verify_session(args.session)
    sys.stdout.write(formats.dumps(report))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rig-annotate", description="Calibration and pose annotation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("pivot", help="tool-tip pivot calibration")
    p.add_argument("--poses", required=True, help="pose list of the pivoting tool")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pivot)

    p = sub.add_parser("handeye", help="hand-eye calibration")
    hsub = p.add_subparsers(dest="route", required=True, metavar="ROUTE")
    h = hsub.add_parser("closed", help="closed form from per-frame board observations")
    h.add_argument("--observations", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_handeye_closed)
    h = hsub.add_parser("traj", help="align a camera trajectory with a marker trajectory")
    h.add_argument("--camera", required=True)
    h.add_argument("--marker", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_handeye_traj)

    p = sub.add_parser("annotate", help="object pose from tip points, correspondences and ICP")
    p.add_argument("--points", required=True, help="tip points in the base frame")
    p.add_argument("--mesh", required=True, help="ASCII PLY mesh")
    p.add_argument("--correspondences", required=True, help="touched points in the mesh frame, same order")
    _add_icp_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("background", help="align a background mesh to a partial scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--init", required=True, help="starting mesh -> base pose")
    _add_icp_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_background)

    p = sub.add_parser("sync", help="time offset between two trajectories")
    p.add_argument("--a", required=True, help="reference trajectory")
    p.add_argument("--b", required=True, help="trajectory whose timestamps get the offset")
    p.add_argument("--dt", required=True, type=float, help="distance-curve grid step, s")
    p.add_argument("--max-offset", required=True, type=float, help="search bound, s")
    p.add_argument("--smooth", type=float, default=0.0, help="position smoothing window, s (default 0)")
    p.add_argument("--oracle", action="store_true", help="use the exhaustive whole-step search")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("camtraj", help="camera trajectory from marker poses and hand-eye")
    p.add_argument("--marker", required=True)
    p.add_argument("--handeye", required=True, help="pose file or hand-eye result")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_camtraj)

    p = sub.add_parser("render", help="depth and instance-mask rendering")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--pose", required=True, help="camera -> base pose")
    p.add_argument("--depth", required=True, help="16-bit PGM, millimeters")
    p.add_argument("--mask", required=True, help="8-bit PGM, instance ids")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sim", help="write a simulated session directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("budget", help="propagate stage errors")
    p.add_argument("--stages", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("verify", help="run the pipeline on a simulated session and report errors")
    p.add_argument("--session", required=True, metavar="DIR")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except RigAnnotateError as e:
        print(f"rig-annotate {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"rig-annotate {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
