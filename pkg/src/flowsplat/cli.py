"""Command-line entry points: run | eval | synth | render.

Results land in files (or stdout for `eval`); errors go to stderr. Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, slam, synth
from .core import CameraIntrinsics, Pose, quaternion_to_rotation
from .losses import ssim
from .renderer import render

__all__ = ["main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="flowsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run SLAM on a sequence manifest")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--config", default=None, help="key = value overrides for SlamConfig")
    pr.add_argument("--out", required=True)

    pe = sub.add_parser("eval", help="evaluate trajectories and optional renders")
    pe.add_argument("--est", required=True)
    pe.add_argument("--gt", required=True)
    pe.add_argument("--renders", default=None)
    pe.add_argument("--targets", default=None)

    ps = sub.add_parser("synth", help="generate a synthetic sequence")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--frames", type=int, default=20)
    ps.add_argument("--traj", default="orbit", choices=("orbit", "line", "static"))
    ps.add_argument("--gaussians", type=int, default=800)
    ps.add_argument("--width", type=int, default=64)
    ps.add_argument("--height", type=int, default=48)
    ps.add_argument("--texture", default="random-color", choices=("random-color", "gradient"))
    ps.add_argument("--out", required=True)

    pv = sub.add_parser("render", help="novel view synthesis from a map snapshot")
    pv.add_argument("--map", required=True)
    pv.add_argument("--pose", required=True, help="'x y z qx qy qz qw' camera-to-world")
    pv.add_argument("--out", required=True)
    pv.add_argument("--manifest", default=None, help="take intrinsics from this manifest")
    pv.add_argument("--intrinsics", default=None, help="'fx fy cx cy width height'")
    return p


def _cmd_run(args) -> int:
    frames, k, gt = dataio.load_sequence(args.manifest)
    cfg = slam.SlamConfig()
    if args.config:
        cfg = dataio.load_config(args.config, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = slam.run(frames, k, cfg)
    metrics.write_trajectory(result.trajectory, out_dir / "trajectory.txt")
    dataio.save_map_snapshot(result.gmap, out_dir / "map.gsmap")
    dataio.write_jsonl(out_dir / "diagnostics.jsonl", result.diagnostics)
    report = _keyframe_report(result, frames, k, cfg)
    if gt is not None:
        report.ate_rmse = metrics.ate_rmse(result.trajectory, gt)
    metrics.write_metrics_report(report, out_dir / "metrics.txt", out_dir / "metrics.jsonl")
    return 0


def _keyframe_report(result, frames, k, cfg) -> metrics.MetricsReport:
    report = metrics.MetricsReport()
    rows = []
    for fi in result.keyframes:
        pose = result.trajectory.pose(fi)
        out = render(result.gmap, pose.inverse(), k, background=cfg.background)
        frame = frames[fi]
        mask = (frame.depth > 0) & (out.alpha > cfg.alpha_mask_threshold)
        row = {
            "frame": fi,
            "psnr": metrics.psnr(out.color, frame.rgb),
            "ssim": ssim(out.color, frame.rgb),
            "depth_rmse": metrics.depth_rmse(out.depth, frame.depth, mask) if mask.any() else 0.0,
        }
        rows.append(row)
    report.per_frame = rows
    if rows:
        report.psnr = float(np.mean([r["psnr"] for r in rows]))
        report.ssim = float(np.mean([r["ssim"] for r in rows]))
        report.depth_rmse = float(np.mean([r["depth_rmse"] for r in rows]))
    return report


def _cmd_eval(args) -> int:
    est = metrics.read_trajectory(args.est)
    gt = metrics.read_trajectory(args.gt)
    print(f"ate_rmse = {metrics.ate_rmse(est, gt):.9g}")
    if args.renders and args.targets:
        renders = sorted(Path(args.renders).glob("*.png"))
        psnrs, ssims = [], []
        for rp in renders:
            tp = Path(args.targets) / rp.name
            if not tp.exists():
                raise dataio.DataError(f"no matching target for {rp}")
            a = dataio.read_rgb_png(rp)
            b = dataio.read_rgb_png(tp)
            psnrs.append(metrics.psnr(a, b))
            ssims.append(ssim(a, b))
        if psnrs:
            print(f"psnr = {np.mean(psnrs):.9g}")
            print(f"ssim = {np.mean(ssims):.9g}")
    return 0


def _cmd_synth(args) -> int:
    scene = synth.SynthScene(seed=args.seed, gaussians=args.gaussians,
                             trajectory=args.traj, frames=args.frames,
                             width=args.width, height=args.height,
                             texture=args.texture)
    manifest = synth.generate(scene, args.out)
    print(manifest)
    return 0


def _parse_pose(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise UsageError("pose must be 'x y z qx qy qz qw'")
    return Pose(quaternion_to_rotation(np.array(vals[3:])), np.array(vals[:3]))


def _parse_intrinsics(args) -> CameraIntrinsics:
    if args.manifest:
        return dataio.load_manifest(args.manifest).intrinsics
    if args.intrinsics:
        vals = [float(v) for v in args.intrinsics.replace(",", " ").split()]
        if len(vals) != 6:
            raise UsageError("intrinsics must be 'fx fy cx cy width height'")
        return CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    raise UsageError("render needs --manifest or --intrinsics")


def _cmd_render(args) -> int:
    gmap = dataio.load_map_snapshot(args.map)
    pose = _parse_pose(args.pose)
    k = _parse_intrinsics(args)
    out = render(gmap, pose.inverse(), k)
    dataio.write_rgb_png(args.out, np.clip(out.color, 0.0, 1.0))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "run": _cmd_run,
            "eval": _cmd_eval,
            "synth": _cmd_synth,
            "render": _cmd_render,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (dataio.DataError, metrics.TrajectoryParseError, FileNotFoundError,
            metrics.UndefinedMetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (slam.InitializationError, slam.TrackingDivergedError,
            FloatingPointError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
