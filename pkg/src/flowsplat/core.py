"""Geometric foundations: pinhole camera, SE(3) poses, Gaussian map containers.

All types are plain float64 numpy under the hood. Poses, frames and single
Gaussians are immutable after construction; ``GaussianMap`` is the one
mutable container (its generation counter is bumped whenever the set of
Gaussians changes, never on in-place parameter updates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Z_NEAR",
    "CameraIntrinsics",
    "Pose",
    "Gaussian",
    "GaussianMap",
    "Frame",
    "se3_exp",
    "se3_log",
    "project_point",
    "unproject_pixel",
    "rotation_to_quaternion",
    "quaternion_to_rotation",
]

Z_NEAR = 1e-4  # camera-space depth at or below which geometry is culled
_ROT_TOL = 1e-9
_SMALL_ANGLE = 1e-8


def _frozen_array(values, shape, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths / principal point in pixels plus image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform on SE(3).

    The SLAM layer stores camera-to-world poses and hands the inverse to the
    rasterizer. Optimization updates are applied as left multiplication by
    ``se3_exp`` of a small tangent step, which keeps rotations orthonormal
    without periodic re-orthogonalization.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ROT_TOL:
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
            raise ValueError("rotation must have determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError("expected a 3x4 or 4x4 matrix")
        return cls(m[:3, :3], m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """Return self @ other (apply ``other`` first, then ``self``)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point or an array of points with trailing dim 3."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def se3_exp(tangent: np.ndarray) -> Pose:
    """Exponential map of a twist ``[wx wy wz vx vy vz]`` to a Pose.

    Rotation via Rodrigues' formula; translation through the left Jacobian,
    with series expansions below the small-angle threshold.
    """
    xi = np.asarray(tangent, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("tangent must be finite")
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    K = _skew(w)
    K2 = K @ K
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        A = 1.0 - t2 / 6.0
        B = 0.5 - t2 / 24.0
        C = 1.0 / 6.0 - t2 / 120.0
    else:
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / (theta * theta)
        C = (1.0 - A) / (theta * theta)
    R = np.eye(3) + A * K + B * K2
    V = np.eye(3) + B * K + C * K2
    return Pose(R, V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp`; valid for rotation angles below pi."""
    R = pose.rotation
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        w = vee  # first-order: theta/sin(theta) -> 1
    else:
        w = (theta / math.sin(theta)) * vee
    K = _skew(w)
    if theta < _SMALL_ANGLE:
        D = 1.0 / 12.0
    else:
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / (theta * theta)
        D = (1.0 - A / (2.0 * B)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * K + D * (K @ K)
    return np.concatenate([w, V_inv @ pose.translation])


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to Hamilton quaternion ``(qx, qy, qz, qw)``, qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Hamilton quaternion ``(qx, qy, qz, qw)`` to a rotation matrix; normalizes first."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0 or not np.all(np.isfinite(q)):
        raise ValueError("quaternion must be finite and nonzero")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_point(k: CameraIntrinsics, world_to_camera: Pose, x_world) -> Optional[tuple[np.ndarray, float]]:
    """Perspective-project a world point.

    Returns ``(pixel, depth_cam)`` or ``None`` when the point sits at or behind
    the near plane (callers skip such points).
    """
    x = np.asarray(x_world, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(x)):
        raise ValueError("point must be finite")
    p = world_to_camera.apply(x)
    z = float(p[2])
    if z <= Z_NEAR:
        return None
    pixel = np.array([k.fx * p[0] / z + k.cx, k.fy * p[1] / z + k.cy])
    return pixel, z


def unproject_pixel(k: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    """Back-project a pixel at a given camera-space depth to camera coordinates."""
    px, py = float(pixel[0]), float(pixel[1])
    d = float(depth)
    return np.array([(px - k.cx) * d / k.fx, (py - k.cy) * d / k.fy, d])


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Isotropic 3D Gaussian primitive.

    The implied covariance is ``scale**2 * I``, so its Cholesky factor is
    ``scale * I`` and the 2D footprint is fully determined by the projected
    center and the projection Jacobian.
    """

    center: np.ndarray
    scale: float
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen_array(self.center, (3,), "center"))
        object.__setattr__(self, "color", _frozen_array(self.color, (3,), "color"))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "opacity", float(self.opacity))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must be in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must be in [0, 1]")


class GaussianMap:
    """Ordered collection of isotropic Gaussians stored as struct-of-arrays.

    ``ids`` are stable integer identifiers that survive pruning, so covisibility
    bookkeeping stays valid as the map grows and shrinks. ``generation`` is
    bumped whenever Gaussians are added or removed.
    """

    __slots__ = ("centers", "scales", "opacities", "colors", "ids", "generation", "_next_id")

    def __init__(self, centers, scales, opacities, colors, ids=None, generation: int = 0):
        self.centers = np.array(centers, dtype=np.float64, copy=True).reshape(-1, 3)
        n = self.centers.shape[0]
        self.scales = np.array(scales, dtype=np.float64, copy=True).reshape(n)
        self.opacities = np.array(opacities, dtype=np.float64, copy=True).reshape(n)
        self.colors = np.array(colors, dtype=np.float64, copy=True).reshape(n, 3)
        if ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.array(ids, dtype=np.int64, copy=True).reshape(n)
        self.generation = int(generation)
        self._next_id = int(self.ids.max()) + 1 if n else 0
        self.validate()

    @classmethod
    def empty(cls) -> "GaussianMap":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian]) -> "GaussianMap":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            np.stack([g.center for g in gs]),
            np.array([g.scale for g in gs]),
            np.array([g.opacity for g in gs]),
            np.stack([g.color for g in gs]),
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.centers[i], self.scales[i], self.opacities[i], self.colors[i])

    def copy(self) -> "GaussianMap":
        m = GaussianMap(self.centers, self.scales, self.opacities, self.colors,
                        ids=self.ids, generation=self.generation)
        m._next_id = self._next_id
        return m

    def append_points(self, centers, scales, opacities, colors) -> None:
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        count = centers.shape[0]
        if count == 0:
            return
        self.centers = np.concatenate([self.centers, centers])
        self.scales = np.concatenate([self.scales, np.asarray(scales, dtype=np.float64).reshape(count)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, dtype=np.float64).reshape(count)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(count, 3)])
        new_ids = np.arange(self._next_id, self._next_id + count, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self._next_id += count
        self.generation += 1
        self.validate()

    def keep(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool).reshape(len(self))
        if mask.all():
            return
        self.centers = self.centers[mask].copy()
        self.scales = self.scales[mask].copy()
        self.opacities = self.opacities[mask].copy()
        self.colors = self.colors[mask].copy()
        self.ids = self.ids[mask].copy()
        self.generation += 1

    def validate(self) -> None:
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")
        if np.any(self.scales <= 0) or not np.all(np.isfinite(self.scales)):
            raise ValueError("scales must be positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must be in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("colors must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D observation; depth 0 marks invalid pixels.

    ``flow_to_next`` optionally carries dense 2D motion from this frame to the
    next one in the sequence (sentinel magnitudes above 1e9 mean unknown).
    """

    index: int
    rgb: np.ndarray
    depth: np.ndarray
    flow_to_next: Optional[np.ndarray] = None
    pose_gt: Optional[Pose] = None

    def __post_init__(self):
        rgb = np.array(self.rgb, dtype=np.float64, copy=True)
        depth = np.array(self.depth, dtype=np.float64, copy=True)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be HxWx3")
        if depth.shape != rgb.shape[:2]:
            raise ValueError("depth must match rgb spatially")
        if not np.all(np.isfinite(rgb)) or np.any(rgb < 0) or np.any(rgb > 1):
            raise ValueError("rgb values must be finite and in [0, 1]")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth values must be finite and >= 0")
        rgb.flags.writeable = False
        depth.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        if self.flow_to_next is not None:
            flow = np.array(self.flow_to_next, dtype=np.float64, copy=True)
            if flow.shape != rgb.shape[:2] + (2,):
                raise ValueError("flow must be HxWx2 matching rgb")
            flow.flags.writeable = False
            object.__setattr__(self, "flow_to_next", flow)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]

    def valid_depth_mask(self) -> np.ndarray:
        return self.depth > 0
