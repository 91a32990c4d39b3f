"""Scalar objectives for tracking, mapping and refinement.

Every loss returns ``(value, per-pixel gradient)`` so the renderer backward
can consume the gradients directly. Masks are boolean H x W arrays treated
as constants of the objective (``None`` means all pixels). All losses are
non-negative and zero on exact-match inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "LossWeights",
    "loss_rgb",
    "loss_depth_reg",
    "loss_scale_invariant",
    "loss_flow",
    "loss_depth_l1",
    "ssim",
    "ssim_with_grad",
    "loss_refine",
]

_LOG_DEPTH_FLOOR = 1e-6
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the tracking/mapping objectives and refinement."""

    lambda_rgb: float = 0.9
    lambda_depth_reg: float = 0.05
    lambda_scale: float = 0.05
    lambda_flow: float = 0.2
    lambda_dssim: float = 0.2
    w_h: float = 1.0
    w_v: float = 1.0

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_depth_reg", "lambda_scale", "lambda_flow",
                     "w_h", "w_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0.0 <= self.lambda_dssim <= 1.0):
            raise ValueError("lambda_dssim must be in [0, 1]")


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ValueError("mask shape must match the image")
    return m


def loss_rgb(rendered: np.ndarray, target: np.ndarray, mask=None):
    """Mean L1 over masked pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("image shapes must match")
    m = _as_mask(mask, rendered.shape[:2])
    n = int(m.sum()) * rendered.shape[2]
    grad = np.zeros_like(rendered)
    if n == 0:
        return 0.0, grad
    diff = rendered - target
    mm = m[..., None]
    value = float(np.abs(diff[m]).sum() / n)
    grad = np.where(mm, np.sign(diff) / n, 0.0)
    return value, grad


def loss_depth_reg(depth: np.ndarray, mask=None, w_h: float = 1.0, w_v: float = 1.0):
    """Weighted mean absolute forward-difference of a depth map.

    Each direction is normalized by its own count of valid sites (both
    neighbors masked in); a direction with no sites contributes 0. The
    subgradient at exact ties is 0.
    """
    d = np.asarray(depth, dtype=np.float64)
    m = _as_mask(mask, d.shape)
    grad = np.zeros_like(d)
    value = 0.0
    sites_h = m[:, :-1] & m[:, 1:]
    nh = int(sites_h.sum())
    if nh > 0:
        gh = d[:, 1:] - d[:, :-1]
        value += w_h * float(np.abs(gh[sites_h]).sum()) / nh
        sh = np.where(sites_h, np.sign(gh), 0.0) * (w_h / nh)
        grad[:, 1:] += sh
        grad[:, :-1] -= sh
    sites_v = m[:-1, :] & m[1:, :]
    nv = int(sites_v.sum())
    if nv > 0:
        gv = d[1:, :] - d[:-1, :]
        value += w_v * float(np.abs(gv[sites_v]).sum()) / nv
        sv = np.where(sites_v, np.sign(gv), 0.0) * (w_v / nv)
        grad[1:, :] += sv
        grad[:-1, :] -= sv
    return value, grad


def loss_scale_invariant(rendered_depth: np.ndarray, target_depth: np.ndarray, mask=None):
    """Log-depth objective invariant to global depth scaling.

    With g_i = log(d_hat_i) - log(d_i) over the n masked pixels the value is
    mean(g^2) - mean(g)^2; rendered depths are clamped below at 1e-6 before
    the log (clamped pixels get zero gradient).
    """
    dh = np.asarray(rendered_depth, dtype=np.float64)
    dt = np.asarray(target_depth, dtype=np.float64)
    if dh.shape != dt.shape:
        raise ValueError("depth shapes must match")
    m = _as_mask(mask, dh.shape) & (dt > 0)
    n = int(m.sum())
    grad = np.zeros_like(dh)
    if n == 0:
        return 0.0, grad
    dc = np.maximum(dh, _LOG_DEPTH_FLOOR)
    g = np.where(m, np.log(dc) - np.log(np.where(m, dt, 1.0)), 0.0)
    total = g.sum()
    value = float((g * g).sum() / n - (total / n) ** 2)
    coeff = (2.0 * g / n - 2.0 * total / (n * n)) / dc
    grad = np.where(m & (dh > _LOG_DEPTH_FLOOR), coeff, 0.0)
    return value, grad


def loss_flow(rendered_flow: np.ndarray, gt_flow: np.ndarray, mask=None):
    """Mean per-pixel Euclidean norm of the flow residual over masked pixels."""
    rf = np.asarray(rendered_flow, dtype=np.float64)
    gf = np.asarray(gt_flow, dtype=np.float64)
    if rf.shape != gf.shape:
        raise ValueError("flow shapes must match")
    m = _as_mask(mask, rf.shape[:2])
    n = int(m.sum())
    grad = np.zeros_like(rf)
    if n == 0:
        return 0.0, grad
    r = rf - gf
    norm = np.sqrt((r * r).sum(axis=-1))
    value = float(norm[m].sum() / n)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where((m & (norm > 0))[..., None], r / (safe[..., None] * n), 0.0)
    return value, grad


def loss_depth_l1(rendered_depth: np.ndarray, target_depth: np.ndarray, mask=None):
    """Mean absolute depth residual over masked pixels (plain mapping depth term)."""
    dh = np.asarray(rendered_depth, dtype=np.float64)
    dt = np.asarray(target_depth, dtype=np.float64)
    if dh.shape != dt.shape:
        raise ValueError("depth shapes must match")
    m = _as_mask(mask, dh.shape) & (dt > 0)
    n = int(m.sum())
    grad = np.zeros_like(dh)
    if n == 0:
        return 0.0, grad
    diff = dh - dt
    value = float(np.abs(diff[m]).sum() / n)
    grad = np.where(m, np.sign(diff) / n, 0.0)
    return value, grad


def _gauss_kernel() -> np.ndarray:
    r = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * _SSIM_SIGMA ** 2))
    return g / g.sum()


_KERNEL_1D = _gauss_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with the Gaussian window
    kk = _KERNEL_1D
    hk = _SSIM_WINDOW
    H, W = img.shape
    tmp = np.zeros((H - hk + 1, W))
    for i in range(hk):
        tmp += kk[i] * img[i:i + H - hk + 1, :]
    out = np.zeros((H - hk + 1, W - hk + 1))
    for j in range(hk):
        out += kk[j] * tmp[:, j:j + W - hk + 1]
    return out


def _spread_valid(coef: np.ndarray, shape) -> np.ndarray:
    # adjoint of _filter_valid
    kk = _KERNEL_1D
    hk = _SSIM_WINDOW
    H, W = shape
    hv, wv = coef.shape
    tmp = np.zeros((hv, W))
    for j in range(hk):
        tmp[:, j:j + wv] += kk[j] * coef
    out = np.zeros((H, W))
    for i in range(hk):
        out[i:i + hv, :] += kk[i] * tmp
    return out


def _ssim_channel(a: np.ndarray, b: np.ndarray):
    mua = _filter_valid(a)
    mub = _filter_valid(b)
    pa = _filter_valid(a * a)
    pb = _filter_valid(b * b)
    pab = _filter_valid(a * b)
    va = pa - mua * mua
    vb = pb - mub * mub
    cab = pab - mua * mub
    a1 = 2.0 * mua * mub + _SSIM_C1
    a2 = 2.0 * cab + _SSIM_C2
    b1 = mua * mua + mub * mub + _SSIM_C1
    b2 = va + vb + _SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mua, mub, a1, a2, b1, b2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5) on [0, 1]
    images, averaged over channels and valid window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("expected two HxWx3 images of equal shape")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    total = 0.0
    for ch in range(3):
        s, _ = _ssim_channel(a[..., ch], b[..., ch])
        total += float(s.mean())
    return total / 3.0


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """SSIM value plus its gradient w.r.t. the first image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("expected two HxWx3 images of equal shape")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    total = 0.0
    grad = np.zeros_like(a)
    for ch in range(3):
        ac, bc = a[..., ch], b[..., ch]
        s, (mua, mub, a1, a2, b1, b2) = _ssim_channel(ac, bc)
        f = 1.0 / (3.0 * s.size)
        total += float(s.mean())
        inv = 1.0 / (b1 * b2)
        c_mua = f * (2.0 * mub * a2 * inv - 2.0 * mua * s / b1
                     + 2.0 * mua * s / b2 - 2.0 * mub * a1 * inv)
        c_pa = f * (-s / b2)
        c_pab = f * (2.0 * a1 * inv)
        grad[..., ch] = (_spread_valid(c_mua, ac.shape)
                         + 2.0 * ac * _spread_valid(c_pa, ac.shape)
                         + bc * _spread_valid(c_pab, ac.shape))
    return total / 3.0, grad


def loss_refine(rendered_rgb, target_rgb, rendered_depth, target_depth,
                mask=None, lambda_dssim: float = 0.2):
    """Refinement objective: blended L1 / (1-SSIM) photometric term plus the
    squared difference of depth-map forward gradients, mean-normalized per
    direction over valid sites.

    Returns ``(value, grad_rgb, grad_depth)``.
    """
    rr = np.asarray(rendered_rgb, dtype=np.float64)
    tr = np.asarray(target_rgb, dtype=np.float64)
    rd = np.asarray(rendered_depth, dtype=np.float64)
    td = np.asarray(target_depth, dtype=np.float64)
    l1, g1 = loss_rgb(rr, tr)
    value = (1.0 - lambda_dssim) * l1
    grad_rgb = (1.0 - lambda_dssim) * g1
    if lambda_dssim > 0:
        s, gs = ssim_with_grad(rr, tr)
        value += lambda_dssim * (1.0 - s)
        grad_rgb -= lambda_dssim * gs
    m = _as_mask(mask, rd.shape)
    grad_depth = np.zeros_like(rd)
    sites_h = m[:, :-1] & m[:, 1:]
    nh = int(sites_h.sum())
    if nh > 0:
        dh = (rd[:, 1:] - rd[:, :-1]) - (td[:, 1:] - td[:, :-1])
        value += float((dh[sites_h] ** 2).sum()) / nh
        gh = np.where(sites_h, 2.0 * dh / nh, 0.0)
        grad_depth[:, 1:] += gh
        grad_depth[:, :-1] -= gh
    sites_v = m[:-1, :] & m[1:, :]
    nv = int(sites_v.sum())
    if nv > 0:
        dv = (rd[1:, :] - rd[:-1, :]) - (td[1:, :] - td[:-1, :])
        value += float((dv[sites_v] ** 2).sum()) / nv
        gv = np.where(sites_v, 2.0 * dv / nv, 0.0)
        grad_depth[1:, :] += gv
        grad_depth[:-1, :] -= gv
    return value, grad_rgb, grad_depth
