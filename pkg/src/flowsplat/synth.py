"""Synthetic RGB-D(+flow) sequence generation.

Scenes are bumpy, textured Gaussian sheets facing the camera, rendered with
the package's own rasterizer along a chosen trajectory, so every generated
pixel is exactly representable by the map model. Ground-truth flow between
consecutive frames comes from the flow renderer under the true poses.
Output trees are a manifest, 8-bit RGB PNGs, 16-bit depth PNGs, .flo files
and a TUM ground-truth trajectory; everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, GaussianMap, Pose
from .dataio import (SequenceManifest, flo_write, write_depth_png, write_manifest,
                     write_rgb_png)
from .metrics import Trajectory, write_trajectory
from .renderer import render, render_flow

__all__ = ["SynthScene", "make_intrinsics", "scene_map", "scene_trajectory", "generate"]

_PLANE_Z = 1.4
_BUMP_AMPLITUDE = 0.12
_DEPTH_SCALE = 1e-4
_ALPHA_VALID = 0.5
_ORBIT_RADIUS = 0.4
_ORBIT_SPAN = 1.3
_RAMP_FRAMES = 5


@dataclass(frozen=True)
class SynthScene:
    seed: int = 0
    gaussians: int = 800
    trajectory: str = "orbit"  # orbit | line | static
    frames: int = 20
    width: int = 64
    height: int = 48
    texture: str = "random-color"  # random-color | gradient

    def __post_init__(self):
        if self.gaussians < 1 or self.frames < 1:
            raise ValueError("gaussians and frames must be >= 1")
        if self.trajectory not in ("orbit", "line", "static"):
            raise ValueError("trajectory must be orbit, line or static")
        if self.texture not in ("random-color", "gradient"):
            raise ValueError("texture must be random-color or gradient")


def make_intrinsics(width: int, height: int) -> CameraIntrinsics:
    # wide field of view plus a close scene: translation parallax then clearly
    # separates from rotation, which keeps pose estimation well conditioned
    f = 0.7 * width
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def scene_map(scene: SynthScene, k: CameraIntrinsics) -> GaussianMap:
    """A jittered grid of Gaussians on a gently bumped plane in front of z=0."""
    rng = np.random.default_rng(scene.seed)
    # margin keeps the sheet visible across the whole trajectory
    half_x = 1.45 * (k.width / 2.0) / k.fx * _PLANE_Z
    half_y = 1.45 * (k.height / 2.0) / k.fy * _PLANE_Z
    aspect = half_x / half_y
    ny = max(int(round(np.sqrt(scene.gaussians / aspect))), 2)
    nx = max(int(round(scene.gaussians / ny)), 2)
    xs = np.linspace(-half_x, half_x, nx)
    ys = np.linspace(-half_y, half_y, ny)
    gx, gy = np.meshgrid(xs, ys)
    spacing = xs[1] - xs[0]
    x = gx.ravel() + rng.uniform(-0.25, 0.25, gx.size) * spacing
    y = gy.ravel() + rng.uniform(-0.25, 0.25, gy.size) * spacing
    z = np.full(gx.size, _PLANE_Z)
    for _ in range(3):
        kx, ky = rng.uniform(1.5, 5.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        z = z + _BUMP_AMPLITUDE * np.sin(kx * x + ky * y + phase)
    centers = np.stack([x, y, z], axis=-1)
    scales = spacing * 0.7 * rng.uniform(0.9, 1.1, gx.size)
    opacities = rng.uniform(0.75, 0.95, gx.size)
    if scene.texture == "random-color":
        colors = rng.uniform(0.03, 0.97, (gx.size, 3))
    else:
        u = (x + half_x) / (2 * half_x)
        v = (y + half_y) / (2 * half_y)
        colors = np.stack([u, v, 1.0 - 0.5 * (u + v)], axis=-1)
        colors = np.clip(colors + rng.normal(0, 0.02, colors.shape), 0.0, 1.0)
    return GaussianMap(centers, scales, opacities, colors)


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=-1)  # camera-to-world, +z forward
    return Pose(R, center)


def scene_trajectory(scene: SynthScene) -> list[Pose]:
    n = scene.frames
    if scene.trajectory == "static" or n == 1:
        return [Pose.identity() for _ in range(n)]
    # ramp the speed up over the first few steps (a camera starting from rest),
    # then move at constant speed, which a constant-velocity tracker can predict
    steps = np.minimum(np.arange(1, n), _RAMP_FRAMES) / _RAMP_FRAMES if n > 1 else np.zeros(0)
    progress = np.concatenate([[0.0], np.cumsum(steps)])
    progress /= max(progress[-1], 1.0)
    if scene.trajectory == "line":
        length = 0.15
        return [Pose(np.eye(3), np.array([length * s, 0.0, 0.0])) for s in progress]
    target = np.array([0.0, 0.0, _PLANE_Z])
    poses = []
    for s in progress:
        psi = _ORBIT_SPAN * (s - 0.5)
        center = np.array([_ORBIT_RADIUS * np.sin(psi),
                           0.3 * _ORBIT_RADIUS * (1 - np.cos(psi)), 0.0])
        poses.append(_look_at(center, target))
    return poses


def generate(scene: SynthScene, out_dir) -> Path:
    """Render and write the full sequence; returns the manifest path."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    flow_dir = out / "flow"
    frames_dir.mkdir(parents=True, exist_ok=True)
    flow_dir.mkdir(parents=True, exist_ok=True)
    k = make_intrinsics(scene.width, scene.height)
    gmap = scene_map(scene, k)
    poses = scene_trajectory(scene)
    w2c = [p.inverse() for p in poses]
    outputs = [render(gmap, w, k, want_contributors=True) for w in w2c]
    for i, o in enumerate(outputs):
        depth = np.where(o.alpha > _ALPHA_VALID, o.depth, 0.0)
        write_rgb_png(frames_dir / f"rgb_{i:06d}.png", o.color)
        write_depth_png(frames_dir / f"depth_{i:06d}.png", depth, _DEPTH_SCALE)
        if i + 1 < len(outputs):
            flow = render_flow(gmap, w2c[i], w2c[i + 1], k, out_t=o)
            flo_write(flow, flow_dir / f"flow_{i:06d}.flo")
    write_trajectory(Trajectory(list(enumerate(poses))), out / "groundtruth.txt")
    manifest = SequenceManifest(
        root=out,
        intrinsics=k,
        depth_scale=_DEPTH_SCALE,
        frames_dir=Path("frames"),
        flow_dir=Path("flow"),
        gt_traj=Path("groundtruth.txt"),
    )
    manifest_path = out / "manifest.txt"
    write_manifest(manifest, manifest_path)
    return manifest_path
