"""The SLAM pipeline: initialization from the first RGB-D frame, per-frame
pose tracking, keyframe joint pose+map optimization with the optical-flow
constraint, windowed local bundle adjustment, map densification/pruning
and two-stage global refinement.

Tracking never mutates the map and refinement never touches poses; the loop
is strictly sequential frame to frame. All randomness flows from the config
seed, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (CameraIntrinsics, Frame, GaussianMap, Pose, se3_exp, se3_log,
                   unproject_pixel)
from .dataio import flow_valid_mask
from .losses import (LossWeights, loss_depth_l1, loss_depth_reg, loss_flow,
                     loss_refine, loss_rgb, loss_scale_invariant)
from .metrics import Trajectory, psnr
from .optim import Adam
from .renderer import (GradientBundle, RenderOutput, flow_backward, render,
                       render_backward, render_flow)

__all__ = [
    "SlamConfig",
    "SlamState",
    "SlamResult",
    "FlowContext",
    "ObjectiveResult",
    "InitializationError",
    "TrackingDivergedError",
    "evaluate_objective",
    "initialize",
    "track_nonkeyframe",
    "optimize_keyframe",
    "is_keyframe",
    "densify_and_prune",
    "local_ba",
    "global_refine",
    "run",
]

log = logging.getLogger(__name__)

_SCALE_FLOOR = 1e-6
_OPACITY_FLOOR = 1e-4


class InitializationError(RuntimeError):
    """The first frame does not carry enough valid depth to seed a map."""


class TrackingDivergedError(RuntimeError):
    """Tracking hit a non-finite loss; carries the last finite pose."""

    def __init__(self, last_pose: Pose, frame_index: int):
        super().__init__(f"tracking diverged at frame {frame_index}")
        self.last_pose = last_pose
        self.frame_index = frame_index


@dataclass(frozen=True)
class SlamConfig:
    iterations_tracking: int = 15
    iterations_mapping: int = 15
    iterations_init: int = 120  # map-only fitting of the first frame
    keyframe_every: int = 4
    covisibility_threshold: float = 0.9
    window_size: int = 8
    init_stride: int = 2
    init_opacity: float = 0.7
    lr_pose_rotation: float = 2e-3
    lr_pose_translation: float = 1e-3
    lr_pose_decay: float = 1.0  # per-iteration multiplier inside one optimization
    lr_center: float = 1.6e-4  # scaled by the scene extent at initialization
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    densify_alpha: float = 0.3
    densify_depth_ratio: float = 5.0
    prune_opacity: float = 0.05
    refine_stage1: int = 150
    refine_stage2: int = 150
    alpha_mask_threshold: float = 0.5
    covis_mass_min: float = 0.5
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    ba_depth_mode: str = "reg_scale"  # or "l1": plain depth residual during BA
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations_tracking < 1 or self.iterations_mapping < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if not (0.0 <= self.covisibility_threshold <= 1.0):
            raise ValueError("covisibility_threshold must be in [0, 1]")
        if self.keyframe_every < 1 or self.init_stride < 1:
            raise ValueError("keyframe_every and init_stride must be >= 1")
        if self.refine_stage1 < 0 or self.refine_stage2 < 0:
            raise ValueError("refinement iteration counts must be >= 0")
        if self.ba_depth_mode not in ("reg_scale", "l1"):
            raise ValueError("ba_depth_mode must be 'reg_scale' or 'l1'")

    def pose_lr(self) -> np.ndarray:
        return np.array([self.lr_pose_rotation] * 3 + [self.lr_pose_translation] * 3)


@dataclass(frozen=True)
class FlowContext:
    """Flow supervision for one frame: pose of the source frame plus its flow."""

    prev_pose: Pose
    gt_flow: np.ndarray


@dataclass
class ObjectiveResult:
    total: float
    parts: dict
    masks: dict
    grads: Optional[GradientBundle]
    out: RenderOutput


@dataclass
class WindowEntry:
    frame_index: int
    visible: frozenset


@dataclass
class SlamState:
    gmap: GaussianMap
    trajectory: dict
    order: list
    keyframes: list
    window: list
    map_adam: Adam
    rng: np.random.Generator
    scene_extent: float
    last_keyframe: int
    diagnostics: list


@dataclass
class SlamResult:
    trajectory: Trajectory
    gmap: GaussianMap
    keyframes: list
    diagnostics: list


def evaluate_objective(gmap: GaussianMap, pose: Pose, frame: Frame, k: CameraIntrinsics,
                       weights: LossWeights, *, flow_ctx: Optional[FlowContext] = None,
                       masks: Optional[dict] = None, with_grads: bool = True,
                       alpha_threshold: float = 0.5, background=None,
                       depth_mode: str = "reg_scale") -> ObjectiveResult:
    """Weighted tracking/mapping objective at a camera-to-world pose.

    Without ``flow_ctx`` this is the flowless pose objective (photometric +
    depth-gradient regularizer + scale-invariant depth); with it the flow
    residual against ``gt_flow`` is added, rendered between ``prev_pose``
    (fixed contributor records) and ``pose``. Pass ``masks`` to freeze the
    data-dependent masks, e.g. for finite-difference checks; gradients always
    treat masks as constants.
    """
    w2c = pose.inverse()
    out = render(gmap, w2c, k, want_contributors=True, background=background)
    use_flow = flow_ctx is not None and weights.lambda_flow > 0
    out_prev = None
    flow_img = None
    if use_flow:
        prev_w2c = flow_ctx.prev_pose.inverse()
        out_prev = render(gmap, prev_w2c, k, want_contributors=True, background=background)
        flow_img = render_flow(gmap, prev_w2c, w2c, k, out_t=out_prev)
    if masks is None:
        covered = out.alpha > alpha_threshold
        masks = {
            "rgb": np.ones(k.shape, dtype=bool),
            "depth": covered,
            "scale": covered & (frame.depth > 0),
        }
        if use_flow:
            masks["flow"] = flow_valid_mask(flow_ctx.gt_flow) & (out_prev.alpha > alpha_threshold)

    parts: dict = {}
    l_rgb, g_rgb = loss_rgb(out.color, frame.rgb, masks["rgb"])
    parts["rgb"] = l_rgb
    total = weights.lambda_rgb * l_rgb
    u_color = weights.lambda_rgb * g_rgb
    u_depth = np.zeros(k.shape)
    if depth_mode == "l1":
        l_d, g_d = loss_depth_l1(out.depth, frame.depth, masks["scale"])
        parts["depth_l1"] = l_d
        total += weights.lambda_depth_reg * l_d
        u_depth += weights.lambda_depth_reg * g_d
    else:
        l_dr, g_dr = loss_depth_reg(out.depth, masks["depth"], weights.w_h, weights.w_v)
        l_sc, g_sc = loss_scale_invariant(out.depth, frame.depth, masks["scale"])
        parts["depth_reg"] = l_dr
        parts["scale"] = l_sc
        total += weights.lambda_depth_reg * l_dr + weights.lambda_scale * l_sc
        u_depth += weights.lambda_depth_reg * g_dr + weights.lambda_scale * g_sc
    g_flow = None
    if use_flow:
        l_fl, g_flow = loss_flow(flow_img, flow_ctx.gt_flow, masks["flow"])
        parts["flow"] = l_fl
        total += weights.lambda_flow * l_fl

    grads = None
    if with_grads:
        grads = render_backward(gmap, w2c, k, out, d_color=u_color, d_depth=u_depth,
                                pose_key="pose")
        if use_flow:
            fb = flow_backward(gmap, flow_ctx.prev_pose.inverse(), w2c, k, out_prev,
                               weights.lambda_flow * g_flow,
                               pose_keys=("prev_pose", "pose"))
            grads.accumulate(fb)
    return ObjectiveResult(float(total), parts, masks, grads, out)


def _visible_ids(gmap: GaussianMap, splat_mass: np.ndarray, mass_min: float) -> frozenset:
    return frozenset(int(i) for i in gmap.ids[splat_mass > mass_min])


def _pose_anchor(gmap: GaussianMap) -> np.ndarray:
    return gmap.centers.mean(axis=0) if len(gmap) else np.zeros(3)


def _gradient_to_centered(g: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    out = g.copy()
    out[:3] -= np.cross(anchor, g[3:])
    return out


def _step_from_centered(step: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    return np.concatenate([step[:3], np.cross(anchor, step[:3]) + step[3:]])


class _PoseStepper:
    """Adam on a pose tangent whose rotation axis passes through the scene anchor.

    Rotating about the map centroid instead of the camera center decouples the
    rotation/translation ambiguity (a small camera rotation and a sideways
    translation look almost identical through a pinhole), which first-order
    steps need in order to converge in few iterations. The applied update is
    still a left-multiplied se3_exp step on the camera-to-world pose.
    """

    def __init__(self, name: str, anchor: np.ndarray, cfg: SlamConfig, adam: Adam):
        self.name = name
        self.anchor = anchor
        self.adam = adam
        self.base_lr = cfg.pose_lr()
        self.decay = cfg.lr_pose_decay
        self.it = 0
        if name not in adam:
            adam.register(name, (6,), self.base_lr)

    def step(self, pose: Pose, gradient: np.ndarray) -> Pose:
        g = _gradient_to_centered(gradient, self.anchor)
        self.adam._groups[self.name]["lr"] = self.base_lr * (self.decay ** self.it)
        self.it += 1
        delta = self.adam.step(self.name, g)
        return se3_exp(_step_from_centered(delta, self.anchor)).compose(pose)


def _register_map_groups(adam: Adam, gmap: GaussianMap, cfg: SlamConfig, extent: float) -> None:
    n = len(gmap)
    adam.register("center", (n, 3), cfg.lr_center * extent)
    adam.register("scale", (n,), cfg.lr_scale)
    adam.register("opacity", (n,), cfg.lr_opacity)
    adam.register("color", (n, 3), cfg.lr_color)


def _apply_map_step(state: SlamState, bundle: GradientBundle) -> None:
    gmap = state.gmap
    adam = state.map_adam
    gmap.centers = gmap.centers + adam.step("center", bundle.d_center)
    gmap.scales = np.maximum(gmap.scales + adam.step("scale", bundle.d_scale), _SCALE_FLOOR)
    gmap.opacities = np.clip(gmap.opacities + adam.step("opacity", bundle.d_opacity),
                             _OPACITY_FLOOR, 1.0)
    gmap.colors = np.clip(gmap.colors + adam.step("color", bundle.d_color), 0.0, 1.0)


def _stride_grid(shape, stride: int) -> np.ndarray:
    grid = np.zeros(shape, dtype=bool)
    grid[::stride, ::stride] = True
    return grid


def _backproject(frame: Frame, pose: Pose, k: CameraIntrinsics, pick: np.ndarray,
                 cfg: SlamConfig):
    ys, xs = np.nonzero(pick)
    d = frame.depth[ys, xs]
    cam = np.stack([(xs - k.cx) * d / k.fx, (ys - k.cy) * d / k.fy, d], axis=-1)
    centers = pose.apply(cam)
    scales = d * (cfg.init_stride / k.fx) * 0.5
    opacities = np.full(len(ys), cfg.init_opacity)
    colors = frame.rgb[ys, xs]
    return centers, scales, opacities, colors


def initialize(frame0: Frame, k: CameraIntrinsics, cfg: SlamConfig) -> SlamState:
    """Seed the map by back-projecting every ``init_stride``-th valid pixel."""
    if frame0.shape != k.shape:
        raise ValueError("frame size does not match the intrinsics")
    valid = frame0.depth > 0
    if valid.mean() < 0.01:
        raise InitializationError("first frame has valid depth on fewer than 1% of pixels")
    pick = valid & _stride_grid(k.shape, cfg.init_stride)
    pose0 = Pose.identity()
    centers, scales, opacities, colors = _backproject(frame0, pose0, k, pick, cfg)
    gmap = GaussianMap(centers, np.maximum(scales, _SCALE_FLOOR), opacities, colors)
    centroid = centers.mean(axis=0)
    extent = max(float(np.linalg.norm(centers - centroid, axis=1).max()), 1e-6)
    adam = Adam()
    _register_map_groups(adam, gmap, cfg, extent)
    state = SlamState(
        gmap=gmap,
        trajectory={0: pose0},
        order=[0],
        keyframes=[0],
        window=[],
        map_adam=adam,
        rng=np.random.default_rng(cfg.seed),
        scene_extent=extent,
        last_keyframe=0,
        diagnostics=[],
    )
    # fit the fresh map to the first view before any tracking happens; a raw
    # back-projected blanket renders poorly and would bias the first poses
    for _ in range(cfg.iterations_init):
        res = evaluate_objective(gmap, pose0, frame0, k, cfg.weights,
                                 alpha_threshold=cfg.alpha_mask_threshold,
                                 background=cfg.background)
        if not math.isfinite(res.total) or not res.grads.all_finite():
            break
        _apply_map_step(state, res.grads)
    out = render(gmap, pose0.inverse(), k, background=cfg.background)
    state.window.append(WindowEntry(0, _visible_ids(gmap, out.splat_mass, cfg.covis_mass_min)))
    state.diagnostics.append({
        "frame": 0, "keyframe": True, "reason": "initialization",
        "initial_loss": 0.0, "final_loss": 0.0, "iterations": 0,
        "wall_ms": 0.0, "diverged": False, "num_gaussians": len(gmap),
    })
    return state


def _motion_model(state: SlamState) -> Pose:
    last = state.trajectory[state.order[-1]]
    if len(state.order) >= 2:
        prev = state.trajectory[state.order[-2]]
        # body-frame constant velocity: exact on uniform arcs and straight
        # lines; the exp/log pair also stops rounding errors from compounding
        delta = se3_log(prev.inverse().compose(last))
        return last.compose(se3_exp(delta))
    return last


def track_nonkeyframe(state: SlamState, frame: Frame, k: CameraIntrinsics,
                      cfg: SlamConfig):
    """Optimize the camera pose only against the flowless objective.

    Starts from a constant-velocity prediction and returns the best pose seen,
    so the reported final loss never exceeds the initial one. Raises
    :class:`TrackingDivergedError` on a non-finite loss.
    """
    pose = _motion_model(state)
    stepper = _PoseStepper("pose", _pose_anchor(state.gmap), cfg, Adam())
    best_pose = pose
    best_loss = math.inf
    initial_loss = None
    for _ in range(cfg.iterations_tracking):
        res = evaluate_objective(state.gmap, pose, frame, k, cfg.weights,
                                 alpha_threshold=cfg.alpha_mask_threshold,
                                 background=cfg.background)
        if not math.isfinite(res.total) or not res.grads.all_finite():
            raise TrackingDivergedError(best_pose, frame.index)
        if initial_loss is None:
            initial_loss = res.total
        if res.total < best_loss:
            best_loss, best_pose = res.total, pose
        pose = stepper.step(pose, res.grads.pose["pose"])
    final = evaluate_objective(state.gmap, pose, frame, k, cfg.weights,
                               with_grads=False,
                               alpha_threshold=cfg.alpha_mask_threshold,
                               background=cfg.background)
    if math.isfinite(final.total) and final.total < best_loss:
        best_loss, best_pose = final.total, pose
    return best_pose, {"initial_loss": float(initial_loss), "final_loss": float(best_loss)}


def _keyframe_flow_context(state: SlamState, frames, index: int,
                           cfg: SlamConfig) -> Optional[FlowContext]:
    if cfg.weights.lambda_flow <= 0:
        return None
    prev = frames[index - 1]
    if prev.flow_to_next is None:
        log.warning("frame %d: no flow to this keyframe; using the flowless objective", index)
        return None
    return FlowContext(state.trajectory[index - 1], prev.flow_to_next)


def optimize_keyframe(state: SlamState, frames, index: int, init_pose: Pose,
                      k: CameraIntrinsics, cfg: SlamConfig):
    """Jointly optimize the keyframe pose and all Gaussian parameters."""
    frame = frames[index]
    flow_ctx = _keyframe_flow_context(state, frames, index, cfg)
    pose = init_pose
    stepper = _PoseStepper("pose", _pose_anchor(state.gmap), cfg, Adam())
    initial_loss = final_loss = None
    for _ in range(cfg.iterations_tracking):
        res = evaluate_objective(state.gmap, pose, frame, k, cfg.weights,
                                 flow_ctx=flow_ctx,
                                 alpha_threshold=cfg.alpha_mask_threshold,
                                 background=cfg.background)
        if not math.isfinite(res.total) or not res.grads.all_finite():
            log.warning("frame %d: keyframe optimization hit a non-finite value; stopping", index)
            break
        if initial_loss is None:
            initial_loss = res.total
        final_loss = res.total
        pose = stepper.step(pose, res.grads.pose["pose"])
        _apply_map_step(state, res.grads)
    return pose, {"initial_loss": float(initial_loss or 0.0), "final_loss": float(final_loss or 0.0)}


def is_keyframe(state: SlamState, frame: Frame, pose: Pose, k: CameraIntrinsics,
                cfg: SlamConfig):
    """Cadence rule first, then covisibility against the newest keyframe."""
    gap = frame.index - state.last_keyframe
    if gap >= cfg.keyframe_every:
        return True, "cadence"
    out = render(state.gmap, pose.inverse(), k, background=cfg.background)
    vis = _visible_ids(state.gmap, out.splat_mass, cfg.covis_mass_min)
    if not vis:
        return True, "covisibility"
    ref = state.window[-1].visible
    covis = len(vis & ref) / len(vis)
    if covis < cfg.covisibility_threshold:
        return True, "covisibility"
    return False, "covisible"


def densify_and_prune(state: SlamState, frame: Frame, pose: Pose, k: CameraIntrinsics,
                      cfg: SlamConfig) -> None:
    """Insert Gaussians where coverage or depth agreement is poor; prune faint ones."""
    gmap = state.gmap
    out = render(gmap, pose.inverse(), k, background=cfg.background)
    valid_obs = frame.depth > 0
    err = np.abs(out.depth - frame.depth)
    confident = valid_obs & (out.alpha >= cfg.alpha_mask_threshold)
    med = float(np.median(err[confident])) if confident.any() else 0.0
    insert = valid_obs & ((out.alpha < cfg.densify_alpha)
                          | (confident & (err > cfg.densify_depth_ratio * med)))
    pick = insert & _stride_grid(k.shape, cfg.init_stride)
    if pick.any():
        centers, scales, opacities, colors = _backproject(frame, pose, k, pick, cfg)
        gmap.append_points(centers, np.maximum(scales, _SCALE_FLOOR), opacities, colors)
        for name in ("center", "scale", "opacity", "color"):
            state.map_adam.append_rows(name, len(centers))
    faint = gmap.opacities < cfg.prune_opacity
    if faint.any():
        gmap.keep(~faint)
        for name in ("center", "scale", "opacity", "color"):
            state.map_adam.keep_rows(name, ~faint)


def _window_flow_context(state: SlamState, frames, idxs, j: int,
                         poses: dict, cfg: SlamConfig) -> Optional[FlowContext]:
    if j == 0 or cfg.weights.lambda_flow <= 0:
        return None
    prev_fi, fi = idxs[j - 1], idxs[j]
    if fi != prev_fi + 1 or frames[prev_fi].flow_to_next is None:
        return None
    return FlowContext(poses[prev_fi], frames[prev_fi].flow_to_next)


def local_ba(state: SlamState, frames, k: CameraIntrinsics, cfg: SlamConfig) -> None:
    """Joint pose+map optimization over the keyframe window.

    The oldest window pose stays frozen as the gauge anchor. If the summed
    objective fails to decrease (or goes non-finite) the whole step is rolled
    back, so BA never leaves the state worse than it found it.
    """
    idxs = [e.frame_index for e in state.window]
    if len(idxs) < 2:
        return
    poses = {fi: state.trajectory[fi] for fi in idxs}
    snap_map = state.gmap.copy()
    snap_adam = state.map_adam.clone()
    snap_poses = dict(poses)

    def total_objective(current: dict) -> float:
        tot = 0.0
        for j, fi in enumerate(idxs):
            ctx = _window_flow_context(state, frames, idxs, j, current, cfg)
            res = evaluate_objective(state.gmap, current[fi], frames[fi], k, cfg.weights,
                                     flow_ctx=ctx, with_grads=False,
                                     alpha_threshold=cfg.alpha_mask_threshold,
                                     background=cfg.background,
                                     depth_mode=cfg.ba_depth_mode)
            tot += res.total
        return tot

    initial = total_objective(poses)
    pose_adam = Adam()
    anchor = _pose_anchor(state.gmap)
    steppers = {fi: _PoseStepper(f"pose{fi}", anchor, cfg, pose_adam) for fi in idxs[1:]}
    aborted = False
    for _ in range(cfg.iterations_mapping):
        bundle = GradientBundle.zeros(len(state.gmap))
        pose_grads = {fi: np.zeros(6) for fi in idxs}
        finite = True
        for j, fi in enumerate(idxs):
            ctx = _window_flow_context(state, frames, idxs, j, poses, cfg)
            res = evaluate_objective(state.gmap, poses[fi], frames[fi], k, cfg.weights,
                                     flow_ctx=ctx,
                                     alpha_threshold=cfg.alpha_mask_threshold,
                                     background=cfg.background,
                                     depth_mode=cfg.ba_depth_mode)
            if not math.isfinite(res.total) or not res.grads.all_finite():
                finite = False
                break
            pose_grads[fi] += res.grads.pose["pose"]
            if "prev_pose" in res.grads.pose:
                pose_grads[idxs[j - 1]] += res.grads.pose["prev_pose"]
            res.grads.pose.clear()
            bundle.accumulate(res.grads)
        if not finite:
            aborted = True
            break
        for fi in idxs[1:]:
            poses[fi] = steppers[fi].step(poses[fi], pose_grads[fi])
        _apply_map_step(state, bundle)

    final = total_objective(poses) if not aborted else math.inf
    if aborted or not math.isfinite(final) or final > initial:
        state.gmap = snap_map
        state.map_adam = snap_adam
        poses = snap_poses
    for fi in idxs:
        state.trajectory[fi] = poses[fi]


def _keyframe_psnr(state: SlamState, frames, fi: int, k: CameraIntrinsics,
                   cfg: SlamConfig) -> float:
    out = render(state.gmap, state.trajectory[fi].inverse(), k, background=cfg.background)
    return psnr(out.color, frames[fi].rgb)


def _refine_step(state: SlamState, frames, fi: int, k: CameraIntrinsics,
                 cfg: SlamConfig, extra_depth_terms: bool) -> None:
    frame = frames[fi]
    pose = state.trajectory[fi]
    w2c = pose.inverse()
    out = render(state.gmap, w2c, k, want_contributors=True, background=cfg.background)
    covered = out.alpha > cfg.alpha_mask_threshold
    mask = covered & (frame.depth > 0)
    _, g_rgb, g_depth = loss_refine(out.color, frame.rgb, out.depth, frame.depth,
                                    mask, cfg.weights.lambda_dssim)
    u_depth = g_depth
    if extra_depth_terms:
        _, g_dr = loss_depth_reg(out.depth, covered, cfg.weights.w_h, cfg.weights.w_v)
        _, g_sc = loss_scale_invariant(out.depth, frame.depth, mask)
        u_depth = u_depth + cfg.weights.lambda_depth_reg * g_dr + cfg.weights.lambda_scale * g_sc
    bundle = render_backward(state.gmap, w2c, k, out, d_color=g_rgb, d_depth=u_depth)
    _apply_map_step(state, bundle)


def global_refine(state: SlamState, frames, k: CameraIntrinsics, cfg: SlamConfig) -> None:
    """Two-stage map-only refinement; poses are untouched.

    Stage 1 repeatedly revisits the keyframe with the worst cached PSNR and
    optimizes the refinement objective plus the depth regularizer and the
    scale-invariant term, refreshing that frame's cached PSNR. Stage 2
    optimizes the plain refinement objective at uniformly random keyframes.
    """
    kfs = sorted(state.keyframes)
    if not kfs:
        return
    cache = {fi: _keyframe_psnr(state, frames, fi, k, cfg) for fi in kfs}
    for _ in range(cfg.refine_stage1):
        fi = min(kfs, key=lambda f: (cache[f], f))
        _refine_step(state, frames, fi, k, cfg, extra_depth_terms=True)
        cache[fi] = _keyframe_psnr(state, frames, fi, k, cfg)
    for _ in range(cfg.refine_stage2):
        fi = kfs[int(state.rng.integers(len(kfs)))]
        _refine_step(state, frames, fi, k, cfg, extra_depth_terms=False)


def _insert_window(state: SlamState, fi: int, pose: Pose, k: CameraIntrinsics,
                   cfg: SlamConfig) -> None:
    out = render(state.gmap, pose.inverse(), k, background=cfg.background)
    entry = WindowEntry(fi, _visible_ids(state.gmap, out.splat_mass, cfg.covis_mass_min))
    state.window.append(entry)
    if len(state.window) > cfg.window_size:
        newest = state.window[-1]
        scores = []
        for e in state.window[:-1]:
            denom = max(len(e.visible), 1)
            scores.append((len(e.visible & newest.visible) / denom, e.frame_index))
        evict = min(range(len(scores)), key=lambda i: scores[i])
        del state.window[evict]


def run(frames, k: CameraIntrinsics, cfg: Optional[SlamConfig] = None) -> SlamResult:
    """Full pipeline over a frame sequence; see the module docstring."""
    if not frames:
        raise ValueError("empty sequence")
    cfg = cfg or SlamConfig()
    state = initialize(frames[0], k, cfg)
    for i in range(1, len(frames)):
        frame = frames[i]
        t0 = time.perf_counter()
        diverged = False
        try:
            pose, track_diag = track_nonkeyframe(state, frame, k, cfg)
        except TrackingDivergedError as exc:
            log.warning("%s; continuing from the motion model", exc)
            pose = _motion_model(state)
            track_diag = {"initial_loss": math.nan, "final_loss": math.nan}
            diverged = True
        kf, reason = is_keyframe(state, frame, pose, k, cfg)
        state.trajectory[i] = pose
        state.order.append(i)
        if kf:
            pose, kf_diag = optimize_keyframe(state, frames, i, pose, k, cfg)
            state.trajectory[i] = pose
            densify_and_prune(state, frame, pose, k, cfg)
            _insert_window(state, i, pose, k, cfg)
            state.keyframes.append(i)
            state.last_keyframe = i
            local_ba(state, frames, k, cfg)
        state.diagnostics.append({
            "frame": i, "keyframe": bool(kf), "reason": reason,
            "initial_loss": track_diag["initial_loss"],
            "final_loss": track_diag["final_loss"],
            "iterations": cfg.iterations_tracking,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "diverged": diverged,
            "num_gaussians": len(state.gmap),
        })
    global_refine(state, frames, k, cfg)
    traj = Trajectory([(i, state.trajectory[i]) for i in sorted(state.trajectory)])
    return SlamResult(traj, state.gmap, sorted(state.keyframes), state.diagnostics)
