"""Differentiable CPU splatting of isotropic Gaussians.

The forward pass (:func:`render`) projects every Gaussian to a 2D splat,
sorts front to back by camera-space center depth and alpha-composites
color, depth and accumulated opacity over image tiles, optionally
recording per-pixel contributor lists. :func:`render_flow` combines those
records with a second camera pose into a dense 2D motion field (isotropic
Gaussians make per-Gaussian flow collapse to projected-center
displacement). :func:`render_backward` and :func:`flow_backward` push
per-pixel loss gradients back to every Gaussian parameter and to camera
pose tangents.

Everything is float64 and stateless: identical inputs give identical
outputs regardless of tile size, because a pixel's contributor set is
decided by the splat's own elliptical support, never by tile membership.
Contributor-record memory scales with H*W*K_MAX_CONTRIBUTORS, which is
fine at the image sizes this stack targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, Gaussian, GaussianMap, Pose, Z_NEAR

__all__ = [
    "BLUR_FLOOR",
    "ALPHA_MAX",
    "SUPPORT_QMAX",
    "EXIT_TRANSMITTANCE",
    "K_MAX_CONTRIBUTORS",
    "DEPTH_ALPHA_MIN",
    "Splat2D",
    "RenderOutput",
    "GradientBundle",
    "project_gaussian",
    "render",
    "render_flow",
    "render_backward",
    "flow_backward",
]

BLUR_FLOOR = 0.3          # px^2 low-pass added to every projected covariance
ALPHA_MAX = 0.999         # per-splat alpha clamp keeps transmittance positive
SUPPORT_QMAX = 36.0       # squared-Mahalanobis support cutoff (6 sigma); the
                          # exp(-18) ~ 1.5e-8 tail keeps tile decomposition and
                          # finite-difference checks clean
EXIT_TRANSMITTANCE = 1e-4  # a pixel stops accumulating once this opaque
K_MAX_CONTRIBUTORS = 32
RECORD_W_MIN = 1e-12      # blend weights at or below this are not recorded
DEPTH_ALPHA_MIN = 1e-6    # below this accumulated opacity the depth reads 0
TILE = 8


@dataclass(frozen=True)
class Splat2D:
    """A Gaussian projected into the image: 2D mean, covariance, depth, radius."""

    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_cam: float
    radius_px: float


@dataclass
class _Projection:
    """Per-Gaussian projection quantities, full length, invalid rows zeroed."""

    valid: np.ndarray    # [N] bool, in front of camera and touching the image
    order: np.ndarray    # [M] indices of valid splats sorted front to back
    pcam: np.ndarray     # [N,3] camera-frame centers
    mean2d: np.ndarray   # [N,2]
    cov: np.ndarray      # [N,3] (c11, c12, c22)
    conic: np.ndarray    # [N,3] inverse covariance (a11, a12, a22)
    jac: np.ndarray      # [N,4] projection Jacobian rows (a, b, c, d)
    radius3: np.ndarray  # [N] 3-sigma radius in pixels
    rbin: np.ndarray     # [N] support radius used for tiling and culling


def _pinhole(pcam: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    z = pcam[..., 2]
    return np.stack([k.fx * pcam[..., 0] / z + k.cx,
                     k.fy * pcam[..., 1] / z + k.cy], axis=-1)


def _project_map(gmap: GaussianMap, world_to_camera: Pose, k: CameraIntrinsics) -> _Projection:
    n = len(gmap)
    R, t = world_to_camera.rotation, world_to_camera.translation
    pcam = gmap.centers @ R.T + t
    z = pcam[:, 2] if n else np.zeros(0)
    valid = z > Z_NEAR
    mean2d = np.zeros((n, 2))
    cov = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    jac = np.zeros((n, 4))
    radius3 = np.zeros(n)
    rbin = np.zeros(n)
    idx = np.nonzero(valid)[0]
    if idx.size:
        pv = pcam[idx]
        X, Y, Z = pv[:, 0], pv[:, 1], pv[:, 2]
        a = k.fx / Z
        b = -k.fx * X / (Z * Z)
        c = k.fy / Z
        d = -k.fy * Y / (Z * Z)
        mean2d[idx] = _pinhole(pv, k)
        # isotropic world covariance is rotation-invariant, so the camera-frame
        # covariance is still scale^2 * I and the 2D footprint is s^2 * J J^T
        s2 = gmap.scales[idx] ** 2
        c11 = s2 * (a * a + b * b) + BLUR_FLOOR
        c12 = s2 * b * d
        c22 = s2 * (c * c + d * d) + BLUR_FLOOR
        det = c11 * c22 - c12 * c12
        cov[idx, 0], cov[idx, 1], cov[idx, 2] = c11, c12, c22
        conic[idx, 0] = c22 / det
        conic[idx, 1] = -c12 / det
        conic[idx, 2] = c11 / det
        jac[idx, 0], jac[idx, 1], jac[idx, 2], jac[idx, 3] = a, b, c, d
        mid = 0.5 * (c11 + c22)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius3[idx] = 3.0 * np.sqrt(lam_max)
        rbin[idx] = math.sqrt(SUPPORT_QMAX) * np.sqrt(lam_max)
        mx, my, rb = mean2d[idx, 0], mean2d[idx, 1], rbin[idx]
        on_image = ((mx + rb >= -0.5) & (mx - rb <= k.width - 0.5)
                    & (my + rb >= -0.5) & (my - rb <= k.height - 0.5))
        valid[idx[~on_image]] = False
    live = np.nonzero(valid)[0]
    order = live[np.argsort(z[live], kind="stable")] if live.size else live
    return _Projection(valid, order, pcam, mean2d, cov, conic, jac, radius3, rbin)


def project_gaussian(g: Gaussian, world_to_camera: Pose, k: CameraIntrinsics) -> Optional[Splat2D]:
    """Project a single Gaussian; ``None`` when behind the camera or off-image."""
    tmp = GaussianMap(g.center[None, :], np.array([g.scale]),
                      np.array([g.opacity]), g.color[None, :])
    proj = _project_map(tmp, world_to_camera, k)
    if proj.order.size == 0:
        return None
    cov2d = np.array([[proj.cov[0, 0], proj.cov[0, 1]],
                      [proj.cov[0, 1], proj.cov[0, 2]]])
    return Splat2D(0, proj.mean2d[0].copy(), cov2d,
                   float(proj.pcam[0, 2]), float(proj.radius3[0]))


@dataclass(eq=False)
class RenderOutput:
    """Forward-pass images plus optional per-pixel contributor records.

    ``contrib_index`` holds Gaussian positions (not stable ids) in front-to-back
    order, padded with -1; ``contrib_weight`` the blend weights w_i = a_i * T_i
    and ``contrib_alpha`` the clamped per-splat alphas; those three arrays are
    what the backward passes and the flow renderer consume.
    """

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    background: np.ndarray
    flow: Optional[np.ndarray] = None
    contrib_index: Optional[np.ndarray] = None
    contrib_weight: Optional[np.ndarray] = None
    contrib_alpha: Optional[np.ndarray] = None
    splat_mass: Optional[np.ndarray] = None
    _proj: Optional[_Projection] = field(default=None, repr=False)

    def contributors(self, y: int, x: int) -> list[tuple[int, float]]:
        if self.contrib_index is None:
            raise ValueError("render was called without want_contributors")
        out = []
        for s in range(self.contrib_index.shape[2]):
            gi = int(self.contrib_index[y, x, s])
            if gi >= 0:
                out.append((gi, float(self.contrib_weight[y, x, s])))
        return out


def render(gmap: GaussianMap, world_to_camera: Pose, k: CameraIntrinsics, *,
           want_contributors: bool = False, background=None,
           tile_size: int = TILE) -> RenderOutput:
    """Alpha-composite the map front to back into color/depth/opacity images.

    Per pixel and splat, ``alpha_i = opacity_i * exp(-0.5 d^T cov2d^-1 d)``
    clamped to ``ALPHA_MAX``; blend weights are ``w_i = alpha_i * prod(1 - alpha_j)``
    over nearer splats. Depth is the alpha-normalized blend of camera-space
    center depths (0 where accumulated opacity is at most DEPTH_ALPHA_MIN).
    """
    H, W = k.height, k.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    color = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    sumz = np.zeros((H, W))
    n = len(gmap)
    mass = np.zeros(n)
    kmax = K_MAX_CONTRIBUTORS
    rec_i = np.full((H, W, kmax), -1, dtype=np.int32) if want_contributors else None
    rec_w = np.zeros((H, W, kmax)) if want_contributors else None
    rec_a = np.zeros((H, W, kmax)) if want_contributors else None
    max_slots = 0

    proj = _project_map(gmap, world_to_camera, k)
    ids = proj.order
    if ids.size:
        mx = proj.mean2d[ids, 0]
        my = proj.mean2d[ids, 1]
        rb = proj.rbin[ids]
        bx0, bx1 = mx - rb, mx + rb
        by0, by1 = my - rb, my + rb
        opac = gmap.opacities[ids]
        cols = gmap.colors[ids]
        zs = proj.pcam[ids, 2]
        A11 = proj.conic[ids, 0]
        A12 = proj.conic[ids, 1]
        A22 = proj.conic[ids, 2]
        for ty in range(0, H, tile_size):
            th = min(tile_size, H - ty)
            for tx in range(0, W, tile_size):
                tw = min(tile_size, W - tx)
                sel = np.nonzero((bx1 >= tx - 0.5) & (bx0 <= tx + tw - 0.5)
                                 & (by1 >= ty - 0.5) & (by0 <= ty + th - 0.5))[0]
                if sel.size == 0:
                    continue
                ys, xs = np.mgrid[ty:ty + th, tx:tx + tw]
                xs = xs.ravel().astype(np.float64)
                ys = ys.ravel().astype(np.float64)
                dx = xs[None, :] - mx[sel][:, None]
                dy = ys[None, :] - my[sel][:, None]
                q = (A11[sel][:, None] * dx * dx
                     + 2.0 * A12[sel][:, None] * dx * dy
                     + A22[sel][:, None] * dy * dy)
                inside = q <= SUPPORT_QMAX
                g = np.zeros_like(q)
                g[inside] = np.exp(-0.5 * q[inside])
                al = np.minimum(opac[sel][:, None] * g, ALPHA_MAX)
                trans = np.cumprod(1.0 - al, axis=0)
                tbef = np.empty_like(trans)
                tbef[0] = 1.0
                tbef[1:] = trans[:-1]
                w = al * tbef
                w[tbef < EXIT_TRANSMITTANCE] = 0.0
                alpha[ty:ty + th, tx:tx + tw] = w.sum(axis=0).reshape(th, tw)
                sumz[ty:ty + th, tx:tx + tw] = (w * zs[sel][:, None]).sum(axis=0).reshape(th, tw)
                color[ty:ty + th, tx:tx + tw] = (w.T @ cols[sel]).reshape(th, tw, 3)
                mass[ids[sel]] += w.sum(axis=1)
                if want_contributors:
                    # keep the (at most) kmax heaviest weights per pixel; sorting
                    # the kept row positions restores front-to-back order, and
                    # sub-threshold entries stay -1 pads (consumers mask slots
                    # individually, so interleaved padding is fine)
                    P = th * tw
                    kk = min(kmax, w.shape[0])
                    if kk < w.shape[0]:
                        top = np.argpartition(-w, kk - 1, axis=0)[:kk]
                        top.sort(axis=0)
                        wsel = np.take_along_axis(w, top, axis=0)
                        asel = np.take_along_axis(al, top, axis=0)
                    else:
                        top = np.broadcast_to(np.arange(kk)[:, None], (kk, P))
                        wsel, asel = w, al
                    ok = wsel > RECORD_W_MIN
                    sids = ids[sel].astype(np.int32)
                    tile_i = np.where(ok, sids[top], np.int32(-1))
                    rec_i[ty:ty + th, tx:tx + tw, :kk] = tile_i.T.reshape(th, tw, kk)
                    rec_w[ty:ty + th, tx:tx + tw, :kk] = np.where(ok, wsel, 0.0).T.reshape(th, tw, kk)
                    rec_a[ty:ty + th, tx:tx + tw, :kk] = np.where(ok, asel, 0.0).T.reshape(th, tw, kk)
                    max_slots = max(max_slots, kk)

    alpha = np.clip(alpha, 0.0, 1.0)
    depth = np.zeros((H, W))
    covered = alpha > DEPTH_ALPHA_MIN
    depth[covered] = sumz[covered] / alpha[covered]
    color += (1.0 - alpha)[..., None] * bg
    if want_contributors:
        used = max(max_slots, 1)
        rec_i = np.ascontiguousarray(rec_i[:, :, :used])
        rec_w = np.ascontiguousarray(rec_w[:, :, :used])
        rec_a = np.ascontiguousarray(rec_a[:, :, :used])
    return RenderOutput(color=color, depth=depth, alpha=alpha, background=bg,
                        contrib_index=rec_i, contrib_weight=rec_w, contrib_alpha=rec_a,
                        splat_mass=mass, _proj=proj)


def _require_records(out: RenderOutput) -> None:
    if out.contrib_index is None or out._proj is None:
        raise ValueError("contributor records required; render with want_contributors=True")


def render_flow(gmap: GaussianMap, pose_t: Pose, pose_t1: Pose, k: CameraIntrinsics, *,
                out_t: Optional[RenderOutput] = None) -> np.ndarray:
    """Composite per-pixel 2D flow between two world-to-camera poses.

    Blending uses the time-t contributor records; each recorded splat moves by
    the displacement of its projected center between the poses, and weights are
    normalized over the contributors that are still in front of the camera at
    t+1 (so a pixel fully covered by one Gaussian reports that Gaussian's
    displacement exactly). Pixels with no surviving contributors read 0.
    """
    if out_t is None:
        out_t = render(gmap, pose_t, k, want_contributors=True)
    _require_records(out_t)
    proj_t = out_t._proj
    n = len(gmap)
    R1, t1 = pose_t1.rotation, pose_t1.translation
    pcam1 = gmap.centers @ R1.T + t1
    ok1 = pcam1[:, 2] > Z_NEAR if n else np.zeros(0, dtype=bool)
    m1 = np.zeros((n, 2))
    if np.any(ok1):
        m1[ok1] = _pinhole(pcam1[ok1], k)
    idx = out_t.contrib_index
    w = out_t.contrib_weight
    safe = np.where(idx >= 0, idx, 0)
    surv = (idx >= 0) & (w > 0.0)
    if n:
        surv &= ok1[safe]
    ws = np.where(surv, w, 0.0)
    wsum = ws.sum(axis=-1)
    delta = m1[safe] - proj_t.mean2d[safe]
    num = (ws[..., None] * delta).sum(axis=-2)
    H, W = k.height, k.width
    flow = np.zeros((H, W, 2))
    ok = wsum > 1e-12
    flow[ok] = num[ok] / wsum[ok][:, None]
    return flow


@dataclass
class GradientBundle:
    """Gradients of a scalar loss w.r.t. every Gaussian field and pose tangents.

    Pose entries are 6-vectors ``[dL/dw, dL/dv]`` for a left-multiplicative
    tangent on the camera-to-world pose, keyed by the caller-chosen name.
    """

    d_center: np.ndarray
    d_scale: np.ndarray
    d_opacity: np.ndarray
    d_color: np.ndarray
    pose: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n: int) -> "GradientBundle":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def accumulate(self, other: "GradientBundle") -> "GradientBundle":
        self.d_center += other.d_center
        self.d_scale += other.d_scale
        self.d_opacity += other.d_opacity
        self.d_color += other.d_color
        for key, g in other.pose.items():
            if key in self.pose:
                self.pose[key] = self.pose[key] + g
            else:
                self.pose[key] = g.copy()
        return self

    def all_finite(self) -> bool:
        ok = (np.all(np.isfinite(self.d_center)) and np.all(np.isfinite(self.d_scale))
              and np.all(np.isfinite(self.d_opacity)) and np.all(np.isfinite(self.d_color)))
        return bool(ok and all(np.all(np.isfinite(g)) for g in self.pose.values()))


def _scatter_add(acc: np.ndarray, sink: np.ndarray, values: np.ndarray) -> None:
    # bincount is far faster than ufunc.at for these scatter sizes
    if acc.ndim == 1:
        acc += np.bincount(sink, weights=values.ravel(), minlength=acc.shape[0])
    else:
        flat = values.reshape(-1, acc.shape[1])
        for c in range(acc.shape[1]):
            acc[:, c] += np.bincount(sink, weights=flat[:, c], minlength=acc.shape[0])


def _composite_backward(gmap, proj, idx, w, arec, dldw):
    """Push per-slot dL/dw through the alpha-compositing chain.

    Returns per-splat accumulators (one trailing scratch row for padded slots):
    gradients w.r.t. 2D means, 2D covariances (c11, c12-total, c22) and opacity.
    """
    n = len(gmap)
    H, W, K = idx.shape
    valid_slot = (idx >= 0) & (w > 0.0)
    safe = np.where(valid_slot, idx, 0)
    sink = np.where(valid_slot, idx, n).ravel()

    # dL/dalpha_i = T_i dL/dw_i - sum_{j>i} w_j dL/dw_j / (1 - alpha_i)
    cw = w * dldw
    suffix = np.flip(np.cumsum(np.flip(cw, axis=-1), axis=-1), axis=-1) - cw
    T = np.where(arec > 0, w / np.where(arec > 0, arec, 1.0), 0.0)
    dlda = T * dldw - suffix / (1.0 - arec)
    dlda = np.where(valid_slot, dlda, 0.0)

    unclamped = arec < ALPHA_MAX  # clamped slots hold exactly ALPHA_MAX
    oslot = gmap.opacities[safe]
    gslot = np.where(oslot > 0, arec / np.where(oslot > 0, oslot, 1.0), 0.0)
    d_op = np.zeros(n + 1)
    _scatter_add(d_op, sink, np.where(unclamped, dlda * gslot, 0.0))
    dg = np.where(unclamped, dlda * oslot, 0.0)

    gx = np.arange(W, dtype=np.float64)[None, :, None]
    gy = np.arange(H, dtype=np.float64)[:, None, None]
    dxs = gx - proj.mean2d[:, 0][safe]
    dys = gy - proj.mean2d[:, 1][safe]
    a11 = proj.conic[:, 0][safe]
    a12 = proj.conic[:, 1][safe]
    a22 = proj.conic[:, 2][safe]
    vx = a11 * dxs + a12 * dys
    vy = a12 * dxs + a22 * dys

    coef_m = dg * gslot  # dG/d mean2d = G * conic @ delta
    d_mean = np.zeros((n + 1, 2))
    _scatter_add(d_mean, sink, np.stack([coef_m * vx, coef_m * vy], axis=-1))
    coef_s = 0.5 * dg * gslot  # dG/d cov2d = (G/2) (conic d)(conic d)^T
    d_cov = np.zeros((n + 1, 3))
    _scatter_add(d_cov, sink,
                 np.stack([coef_s * vx * vx, 2.0 * coef_s * vx * vy, coef_s * vy * vy],
                          axis=-1))
    return d_mean, d_cov, d_op


def _world_chain(gmap, proj, world_to_camera, k, d_mean, d_cov, d_z):
    """2D-splat gradients -> world-center, scale and pose-tangent gradients.

    The covariance path differentiates cov2d = s^2 J J^T + blur*I through both
    the scale and the Jacobian's dependence on the camera-frame center.
    """
    n = len(gmap)
    d_center = np.zeros((n, 3))
    d_scale = np.zeros(n)
    v = proj.valid
    if np.any(v):
        X, Y, Z = proj.pcam[v, 0], proj.pcam[v, 1], proj.pcam[v, 2]
        a, b, c, d = proj.jac[v, 0], proj.jac[v, 1], proj.jac[v, 2], proj.jac[v, 3]
        g11, g12, g22 = d_cov[v, 0], d_cov[v, 1], d_cov[v, 2]
        dmx, dmy = d_mean[v, 0], d_mean[v, 1]
        s = gmap.scales[v]
        s2 = s * s
        Z2 = Z * Z
        aZ = -k.fx / Z2
        bX = -k.fx / Z2
        bZ = 2.0 * k.fx * X / (Z2 * Z)
        cZ = -k.fy / Z2
        dY = -k.fy / Z2
        dZ = 2.0 * k.fy * Y / (Z2 * Z)
        dS11dX = s2 * 2.0 * b * bX
        dS11dZ = s2 * (2.0 * a * aZ + 2.0 * b * bZ)
        dS12dX = s2 * d * bX
        dS12dY = s2 * b * dY
        dS12dZ = s2 * (bZ * d + b * dZ)
        dS22dY = s2 * 2.0 * d * dY
        dS22dZ = s2 * (2.0 * c * cZ + 2.0 * d * dZ)
        px = a * dmx + g11 * dS11dX + g12 * dS12dX
        py = c * dmy + g12 * dS12dY + g22 * dS22dY
        pz = (b * dmx + d * dmy + d_z[v]
              + g11 * dS11dZ + g12 * dS12dZ + g22 * dS22dZ)
        d_scale[v] = 2.0 * s * (g11 * (a * a + b * b) + g12 * (b * d) + g22 * (c * c + d * d))
        dp = np.stack([px, py, pz], axis=-1)
        d_center[v] = dp @ world_to_camera.rotation
    pose_g = np.concatenate([
        np.cross(d_center, gmap.centers).sum(axis=0),
        -d_center.sum(axis=0),
    ])
    return d_center, d_scale, pose_g


def render_backward(gmap: GaussianMap, world_to_camera: Pose, k: CameraIntrinsics,
                    out: RenderOutput, *, d_color=None, d_depth=None, d_alpha=None,
                    pose_key: str = "pose") -> GradientBundle:
    """Exact gradients of a scalar loss through :func:`render`.

    ``d_color``/``d_depth``/``d_alpha`` are the per-pixel upstream gradients of
    the loss w.r.t. the rendered images. Culled Gaussians get zero gradients.
    """
    _require_records(out)
    proj = out._proj
    n = len(gmap)
    idx = out.contrib_index
    w = out.contrib_weight
    arec = out.contrib_alpha
    H, W, K = idx.shape
    valid_slot = (idx >= 0) & (w > 0.0)
    safe = np.where(valid_slot, idx, 0)
    sink = np.where(valid_slot, idx, n).ravel()

    dldw = np.zeros((H, W, K))
    d_color_acc = np.zeros((n + 1, 3))
    d_z = np.zeros(n + 1)
    if d_color is not None:
        uc = np.asarray(d_color, dtype=np.float64)
        cdiff = gmap.colors[safe] - out.background
        dldw += np.einsum("hwkc,hwc->hwk", cdiff, uc)
        _scatter_add(d_color_acc, sink, w[..., None] * uc[:, :, None, :])
    if d_depth is not None:
        ud = np.asarray(d_depth, dtype=np.float64)
        covered = out.alpha > DEPTH_ALPHA_MIN
        coef = np.where(covered, ud / np.where(covered, out.alpha, 1.0), 0.0)
        zslot = proj.pcam[:, 2][safe]
        dldw += coef[:, :, None] * (zslot - out.depth[:, :, None])
        _scatter_add(d_z, sink, coef[:, :, None] * w)
    if d_alpha is not None:
        dldw += np.asarray(d_alpha, dtype=np.float64)[:, :, None]
    dldw = np.where(valid_slot, dldw, 0.0)

    d_mean, d_cov, d_op = _composite_backward(gmap, proj, idx, w, arec, dldw)
    d_center, d_scale, pose_g = _world_chain(gmap, proj, world_to_camera, k,
                                             d_mean[:n], d_cov[:n], d_z[:n])
    return GradientBundle(d_center, d_scale, d_op[:n], d_color_acc[:n],
                          pose={pose_key: pose_g})


def flow_backward(gmap: GaussianMap, pose_t: Pose, pose_t1: Pose, k: CameraIntrinsics,
                  out_t: RenderOutput, d_flow, *,
                  pose_keys: tuple[str, str] = ("pose_t", "pose_t1")) -> GradientBundle:
    """Exact gradients of a scalar loss through :func:`render_flow`.

    Covers every dependency: the displacement terms at both poses and the
    time-t blend weights (whose chain runs through the full compositing
    backward at pose_t). Contributors dropped at t+1 receive no displacement
    gradient and are excluded from the weight normalization, matching forward.
    """
    _require_records(out_t)
    proj_t = out_t._proj
    n = len(gmap)
    R1, t1 = pose_t1.rotation, pose_t1.translation
    pcam1 = gmap.centers @ R1.T + t1
    ok1 = pcam1[:, 2] > Z_NEAR if n else np.zeros(0, dtype=bool)
    m1 = np.zeros((n, 2))
    if np.any(ok1):
        m1[ok1] = _pinhole(pcam1[ok1], k)

    idx = out_t.contrib_index
    w = out_t.contrib_weight
    arec = out_t.contrib_alpha
    H, W, K = idx.shape
    valid_slot = (idx >= 0) & (w > 0.0)
    safe = np.where(valid_slot, idx, 0)
    sink = np.where(valid_slot, idx, n).ravel()
    surv = valid_slot & (ok1[safe] if n else False)

    ws = np.where(surv, w, 0.0)
    wsum = ws.sum(axis=-1)
    ok_px = wsum > 1e-12
    denom = np.where(ok_px, wsum, 1.0)
    delta = m1[safe] - proj_t.mean2d[safe]
    flow = np.where(ok_px[..., None], (ws[..., None] * delta).sum(axis=-2) / denom[..., None], 0.0)

    u = np.asarray(d_flow, dtype=np.float64) * ok_px[..., None]
    wt = ws / denom[..., None]
    d_delta = wt[..., None] * u[:, :, None, :]
    d_m1 = np.zeros((n + 1, 2))
    _scatter_add(d_m1, sink, np.where(surv[..., None], d_delta, 0.0))
    # normalized-weight quotient: dF/dw_i = (delta_i - F) / sum_surv(w)
    dldw = np.where(surv,
                    ((delta - flow[:, :, None, :]) * u[:, :, None, :]).sum(axis=-1)
                    / denom[..., None],
                    0.0)

    d_mean, d_cov, d_op = _composite_backward(gmap, proj_t, idx, w, arec, dldw)
    _scatter_add(d_mean, sink, np.where(surv[..., None], -d_delta, 0.0))
    d_center, d_scale, pose_t_g = _world_chain(gmap, proj_t, pose_t, k,
                                               d_mean[:n], d_cov[:n], np.zeros(n + 1)[:n])

    # mean-only chain at t+1
    d_center1 = np.zeros((n, 3))
    if np.any(ok1):
        Xv, Yv, Zv = pcam1[ok1, 0], pcam1[ok1, 1], pcam1[ok1, 2]
        a1 = k.fx / Zv
        b1 = -k.fx * Xv / (Zv * Zv)
        c1 = k.fy / Zv
        d1 = -k.fy * Yv / (Zv * Zv)
        dm = d_m1[:n][ok1]
        dp1 = np.stack([a1 * dm[:, 0], c1 * dm[:, 1],
                        b1 * dm[:, 0] + d1 * dm[:, 1]], axis=-1)
        d_center1[ok1] = dp1 @ R1
    pose_t1_g = np.concatenate([
        np.cross(d_center1, gmap.centers).sum(axis=0),
        -d_center1.sum(axis=0),
    ])

    return GradientBundle(d_center + d_center1, d_scale, d_op[:n], np.zeros((n, 3)),
                          pose={pose_keys[0]: pose_t_g, pose_keys[1]: pose_t1_g})
