"""Quantitative evaluation: PSNR, depth RMSE, aligned ATE, trajectory files.

Trajectories are serialized in TUM format, one pose per line:
``index tx ty tz qx qy qz qw`` with '#' comments. ATE rigidly aligns the
estimated positions to ground truth (rotation + translation, no scale)
with the closed-form orthogonal-Procrustes solution before taking the RMSE.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Pose, quaternion_to_rotation, rotation_to_quaternion

__all__ = [
    "PSNR_CAP",
    "UndefinedMetricError",
    "TrajectoryParseError",
    "Trajectory",
    "MetricsReport",
    "psnr",
    "depth_rmse",
    "ate_rmse",
    "align_positions",
    "write_trajectory",
    "read_trajectory",
    "write_metrics_report",
]

PSNR_CAP = 100.0


class UndefinedMetricError(ValueError):
    """A metric was requested on inputs where it is undefined."""


class TrajectoryParseError(ValueError):
    def __init__(self, path, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.line_number = line_number


@dataclass
class Trajectory:
    """Ordered (frame index, camera-to-world pose) pairs."""

    items: list[tuple[int, Pose]] = field(default_factory=list)

    def __post_init__(self):
        idx = [i for i, _ in self.items]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("trajectory indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.items)

    def indices(self) -> list[int]:
        return [i for i, _ in self.items]

    def positions(self) -> np.ndarray:
        return np.array([p.translation for _, p in self.items]).reshape(-1, 3)

    def pose(self, index: int) -> Pose:
        for i, p in self.items:
            if i == index:
                return p
        raise KeyError(index)

    def length(self) -> float:
        """Total path length of consecutive positions."""
        pos = self.positions()
        if len(pos) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes must match")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def depth_rmse(rendered: np.ndarray, target: np.ndarray, mask=None) -> float:
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("depth shapes must match")
    m = np.ones(rendered.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise UndefinedMetricError("depth RMSE undefined on an empty mask")
    diff = rendered[m] - target[m]
    return float(np.sqrt(np.mean(diff * diff)))


def align_positions(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form rigid alignment (no scale) minimizing ||R src + t - dst||^2."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d
    U, _, Vt = np.linalg.svd(X.T @ Y)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(Vt.T @ U.T)))])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory) -> float:
    """Absolute trajectory error after rigid alignment of estimated positions.

    Pairs poses by frame index (inner join); needs at least 3 common indices.
    """
    gt = dict(ground_truth.items)
    pairs = [(p.translation, gt[i].translation) for i, p in estimated.items if i in gt]
    if len(pairs) < 3:
        raise UndefinedMetricError("ATE needs at least 3 common trajectory indices")
    est = np.array([a for a, _ in pairs])
    ref = np.array([b for _, b in pairs])
    R, t = align_positions(est, ref)
    res = est @ R.T + t - ref
    return float(np.sqrt(np.mean((res * res).sum(axis=1))))


def write_trajectory(traj: Trajectory, path) -> None:
    lines = ["# index tx ty tz qx qy qz qw"]
    for i, pose in traj.items:
        q = rotation_to_quaternion(pose.rotation)
        t = pose.translation
        vals = " ".join(format(v, ".12g") for v in (*t, *q))
        lines.append(f"{i} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    items: list[tuple[int, Pose]] = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryParseError(path, ln, f"expected 8 fields, got {len(parts)}")
        try:
            idx = int(float(parts[0]))
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise TrajectoryParseError(path, ln, str(exc)) from None
        t = np.array(vals[:3])
        try:
            R = quaternion_to_rotation(np.array(vals[3:]))
        except ValueError as exc:
            raise TrajectoryParseError(path, ln, str(exc)) from None
        items.append((idx, Pose(R, t)))
    return Trajectory(items)


@dataclass
class MetricsReport:
    psnr: float = 0.0
    ssim: float = 0.0
    depth_rmse: float = 0.0
    ate_rmse: Optional[float] = None
    per_frame: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {"psnr": self.psnr, "ssim": self.ssim, "depth_rmse": self.depth_rmse}
        if self.ate_rmse is not None:
            d["ate_rmse"] = self.ate_rmse
        return d


def write_metrics_report(report: MetricsReport, text_path, jsonl_path=None) -> None:
    lines = [f"{key} = {format(value, '.9g')}" for key, value in report.as_dict().items()]
    Path(text_path).write_text("\n".join(lines) + "\n")
    if jsonl_path is not None:
        rows = [json.dumps({"record": "summary", **report.as_dict()}, sort_keys=True)]
        rows += [json.dumps({"record": "frame", **row}, sort_keys=True) for row in report.per_frame]
        Path(jsonl_path).write_text("\n".join(rows) + "\n")
