"""File formats: sequence manifests, PNG frames, Middlebury .flo flow,
map snapshots and key-value config files.

All binary formats are little-endian and covered by golden-byte tests.
Map snapshots use a small versioned container: magic ``GSMP``, uint32
version, uint32 count, then 8 float32 values per Gaussian
(center xyz, scale, opacity, color rgb).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dataclass_fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, Frame, GaussianMap
from .metrics import Trajectory, read_trajectory

__all__ = [
    "DataError",
    "FLOW_SENTINEL",
    "flow_valid_mask",
    "SequenceManifest",
    "write_rgb_png",
    "read_rgb_png",
    "write_depth_png",
    "read_depth_png",
    "flo_write",
    "flo_read",
    "save_map_snapshot",
    "load_map_snapshot",
    "write_manifest",
    "load_manifest",
    "load_sequence",
    "parse_config_text",
    "load_config",
    "write_jsonl",
]

_FLO_MAGIC = 202021.25
FLOW_SENTINEL = 1e9  # flow magnitudes above this mark unknown flow
_SNAPSHOT_MAGIC = b"GSMP"
_SNAPSHOT_VERSION = 1


class DataError(Exception):
    """A file could not be read or failed validation; message names the file."""


def flow_valid_mask(flow: np.ndarray) -> np.ndarray:
    """True where both flow components are finite and below the unknown sentinel."""
    f = np.asarray(flow)
    return np.all(np.isfinite(f), axis=-1) & np.all(np.abs(f) < FLOW_SENTINEL, axis=-1)


def write_rgb_png(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read rgb png {path}: {exc}") from None
    return arr / 255.0


def write_depth_png(path, depth: np.ndarray, depth_scale: float) -> None:
    """Store depth as 16-bit grayscale: stored * depth_scale = scene units."""
    d = np.asarray(depth, dtype=np.float64) / depth_scale
    data = np.clip(np.rint(d), 0, 65535).astype(np.uint16)
    Image.fromarray(data, mode="I;16").save(path)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth png {path}: {exc}") from None
    if arr.ndim != 2:
        raise DataError(f"depth png {path} is not single-channel")
    return arr * depth_scale


def flo_write(flow: np.ndarray, path) -> None:
    """Middlebury .flo: float magic, int32 width/height, row-major float32 (u, v)."""
    f = np.asarray(flow, dtype=np.float32)
    if f.ndim != 3 or f.shape[2] != 2:
        raise ValueError("flow must be HxWx2")
    h, w = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", _FLO_MAGIC, w, h))
        fh.write(f.astype("<f4").tobytes())


def flo_read(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read flow file {path}: {exc}") from None
    if len(raw) < 12:
        raise DataError(f"flow file {path} is truncated")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != np.float32(_FLO_MAGIC):
        raise DataError(f"flow file {path} has bad magic {magic!r}")
    expected = 12 + 8 * w * h
    if w < 0 or h < 0 or len(raw) < expected:
        raise DataError(f"flow file {path} payload is truncated")
    data = np.frombuffer(raw[12:expected], dtype="<f4")
    return data.reshape(h, w, 2).astype(np.float64)


def save_map_snapshot(gmap: GaussianMap, path) -> None:
    n = len(gmap)
    fields = np.concatenate([
        gmap.centers,
        gmap.scales[:, None],
        gmap.opacities[:, None],
        gmap.colors,
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", _SNAPSHOT_VERSION, n))
        fh.write(fields.tobytes())


def load_map_snapshot(path) -> GaussianMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read map snapshot {path}: {exc}") from None
    if len(raw) < 12 or raw[:4] != _SNAPSHOT_MAGIC:
        raise DataError(f"map snapshot {path} has bad header")
    version, n = struct.unpack("<II", raw[4:12])
    if version != _SNAPSHOT_VERSION:
        raise DataError(f"map snapshot {path} has unsupported version {version}")
    expected = 12 + 4 * 8 * n
    if len(raw) < expected:
        raise DataError(f"map snapshot {path} payload is truncated")
    data = np.frombuffer(raw[12:expected], dtype="<f4").reshape(n, 8).astype(np.float64)
    return GaussianMap(data[:, 0:3], data[:, 3], data[:, 4], data[:, 5:8])


@dataclass
class SequenceManifest:
    """Locations and calibration of one RGB-D(+flow) sequence on disk."""

    root: Path
    intrinsics: CameraIntrinsics
    depth_scale: float
    frames_dir: Path
    flow_dir: Optional[Path] = None
    gt_traj: Optional[Path] = None


def _parse_kv_text(text: str, path) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_manifest(manifest: SequenceManifest, path) -> None:
    k = manifest.intrinsics
    lines = [
        "# flowsplat sequence manifest",
        f"fx = {k.fx!r}",
        f"fy = {k.fy!r}",
        f"cx = {k.cx!r}",
        f"cy = {k.cy!r}",
        f"width = {k.width}",
        f"height = {k.height}",
        f"depth_scale = {manifest.depth_scale!r}",
        f"frames_dir = {manifest.frames_dir.as_posix()}",
    ]
    if manifest.flow_dir is not None:
        lines.append(f"flow_dir = {manifest.flow_dir.as_posix()}")
    if manifest.gt_traj is not None:
        lines.append(f"gt_traj = {manifest.gt_traj.as_posix()}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    kv = _parse_kv_text(text, path)
    required = ["fx", "fy", "cx", "cy", "width", "height", "depth_scale", "frames_dir"]
    missing = [key for key in required if key not in kv]
    if missing:
        raise DataError(f"manifest {path} is missing keys: {', '.join(missing)}")
    try:
        intr = CameraIntrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]),
                                float(kv["cy"]), int(kv["width"]), int(kv["height"]))
        depth_scale = float(kv["depth_scale"])
    except ValueError as exc:
        raise DataError(f"manifest {path}: {exc}") from None
    if depth_scale <= 0:
        raise DataError(f"manifest {path}: depth_scale must be positive")
    root = path.parent
    return SequenceManifest(
        root=root,
        intrinsics=intr,
        depth_scale=depth_scale,
        frames_dir=root / kv["frames_dir"],
        flow_dir=root / kv["flow_dir"] if "flow_dir" in kv else None,
        gt_traj=root / kv["gt_traj"] if "gt_traj" in kv else None,
    )


def load_sequence(manifest_path) -> tuple[list[Frame], CameraIntrinsics, Optional[Trajectory]]:
    """Load all frames of a manifest; flow files attach to the frame they leave."""
    man = load_manifest(manifest_path)
    k = man.intrinsics
    rgb_paths = sorted(man.frames_dir.glob("rgb_*.png"))
    if not rgb_paths:
        raise DataError(f"no rgb_*.png frames under {man.frames_dir}")
    frames: list[Frame] = []
    for i, rgb_path in enumerate(rgb_paths):
        stem = rgb_path.stem.split("_", 1)[1]
        if int(stem) != i:
            raise DataError(f"frame files are not index-contiguous at {rgb_path}")
        depth_path = man.frames_dir / f"depth_{stem}.png"
        if not depth_path.exists():
            raise DataError(f"missing depth file {depth_path}")
        rgb = read_rgb_png(rgb_path)
        depth = read_depth_png(depth_path, man.depth_scale)
        if rgb.shape[:2] != (k.height, k.width):
            raise DataError(f"{rgb_path} size {rgb.shape[1]}x{rgb.shape[0]} does not match manifest")
        if depth.shape != (k.height, k.width):
            raise DataError(f"{depth_path} size does not match manifest")
        flow = None
        if man.flow_dir is not None and i + 1 < len(rgb_paths):
            flow_path = man.flow_dir / f"flow_{stem}.flo"
            if flow_path.exists():
                flow = flo_read(flow_path)
                if flow.shape[:2] != (k.height, k.width):
                    raise DataError(f"{flow_path} size does not match manifest")
        frames.append(Frame(index=i, rgb=rgb, depth=depth, flow_to_next=flow))
    gt = read_trajectory(man.gt_traj) if man.gt_traj is not None and man.gt_traj.exists() else None
    return frames, k, gt


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return value


def parse_config_text(text: str, config, path="<config>"):
    """Apply 'dotted.key = value' lines onto a dataclass config, returning a copy."""
    kv = _parse_kv_text(text, path)
    for key, value in kv.items():
        parts = key.split(".")
        try:
            config = _assign(config, parts, value, key, path)
        except ValueError as exc:
            raise DataError(f"{path}: bad value for {key}: {exc}") from None
    return config


def _assign(obj, parts, value, full_key, path):
    name = parts[0]
    if not is_dataclass(obj) or name not in {f.name for f in dataclass_fields(obj)}:
        raise DataError(f"{path}: unknown config key '{full_key}'")
    current = getattr(obj, name)
    if len(parts) == 1:
        return replace(obj, **{name: _coerce(value, current)})
    return replace(obj, **{name: _assign(current, parts[1:], value, full_key, path)})


def load_config(path, config):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, config, path)


def write_jsonl(path, records: list[dict]) -> None:
    import json

    Path(path).write_text("\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n")
