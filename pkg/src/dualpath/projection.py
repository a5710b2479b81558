"""Pinhole camera geometry.

A cloud point is *visible* in a frame when it lies in front of the camera,
projects to pixel ``(floor(u), floor(v))`` inside the image, and its camera
depth agrees with the depth map at that pixel to within ``depth_tol``. The
same predicate drives 2D mask lifting and view selection.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyLift, FormatError, NoProjection, NoVisibleFrame
from .masks import InstanceMask, indices_from_runs, runs_from_indices
from .scene import CameraFrame, PointCloud

Z_NEAR = 1e-4
DEPTH_TOL = 0.05
CROP_LEVELS = 3
CROP_EXPANSION = 0.1


@dataclass(frozen=True, eq=False)
class Mask2D:
    frame_id: str
    width: int
    height: int
    runs: np.ndarray  # (R, 2) start, length over row-major pixels
    id: str = ""
    label: str | None = None
    confidence: float | None = None

    def __post_init__(self):
        runs = np.asarray(self.runs, dtype=np.int64).reshape(-1, 2)
        # validates ordering and bounds
        indices_from_runs(runs, limit=self.width * self.height)
        runs.setflags(write=False)
        object.__setattr__(self, "runs", runs)

    @classmethod
    def from_bool(cls, frame_id: str, flags: np.ndarray, **kw) -> "Mask2D":
        flags = np.asarray(flags, dtype=bool)
        h, w = flags.shape
        return cls(frame_id, w, h, runs_from_indices(np.flatnonzero(flags.ravel())), **kw)

    def pixel_indices(self) -> np.ndarray:
        return indices_from_runs(self.runs)

    def to_bool(self) -> np.ndarray:
        flat = np.zeros(self.width * self.height, dtype=bool)
        flat[self.pixel_indices()] = True
        return flat.reshape(self.height, self.width)

    @property
    def area(self) -> int:
        return int(self.runs[:, 1].sum())


@dataclass(frozen=True)
class CropBox:
    frame_id: str
    u_min: int
    v_min: int
    u_max: int  # exclusive
    v_max: int  # exclusive
    level: int = 0

    def __post_init__(self):
        if self.u_max <= self.u_min or self.v_max <= self.v_min or self.level < 0:
            raise ValueError(f"degenerate crop {self}")

    def contains(self, other: "CropBox") -> bool:
        return (self.u_min <= other.u_min and self.v_min <= other.v_min
                and self.u_max >= other.u_max and self.v_max >= other.v_max)


def world_to_camera(points: np.ndarray, frame: CameraFrame) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ frame.pose[:3, :3].T + frame.pose[:3, 3]


def pinhole(cam: np.ndarray, frame: CameraFrame):
    """Continuous pixel coordinates for camera-frame points (no bounds check)."""
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = frame.fx * cam[:, 0] / z + frame.cx
        v = frame.fy * cam[:, 1] / z + frame.cy
    return u, v, z


def project_point(p, frame: CameraFrame, z_near: float = Z_NEAR):
    """``(u, v, z_cam)`` for a world point, or ``None`` when behind the camera or off-image."""
    u, v, z = pinhole(world_to_camera(p, frame), frame)
    u, v, z = float(u[0]), float(v[0]), float(z[0])
    if z <= z_near or not (0.0 <= u < frame.width and 0.0 <= v < frame.height):
        return None
    return u, v, z


def unproject(u, v, z, frame: CameraFrame) -> np.ndarray:
    """Inverse of the pinhole map: pixel coordinates at camera depth ``z`` back to world."""
    u, v, z = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (u, v, z))
    cam = np.stack([(u - frame.cx) * z / frame.fx, (v - frame.cy) * z / frame.fy, z], axis=1)
    R, t = frame.pose[:3, :3], frame.pose[:3, 3]
    world = (cam - t) @ R
    return world[0] if world.shape[0] == 1 else world


@dataclass(frozen=True, eq=False)
class FrameVisibility:
    visible: np.ndarray  # (N,) bool
    pixel: np.ndarray  # (N,) flat pixel index, -1 where off-image or behind


_vis_cache: "weakref.WeakKeyDictionary[CameraFrame, dict]" = weakref.WeakKeyDictionary()


def frame_visibility(cloud: PointCloud, frame: CameraFrame, depth_tol: float = DEPTH_TOL,
                     z_near: float = Z_NEAR) -> FrameVisibility:
    key = (id(cloud), float(depth_tol), float(z_near))
    per_frame = _vis_cache.setdefault(frame, {})
    hit = per_frame.get(key)
    if hit is not None and hit[0] is cloud:
        return hit[1]

    u, v, z = pinhole(world_to_camera(cloud.positions, frame), frame)
    inside = (z > z_near) & (u >= 0) & (u < frame.width) & (v >= 0) & (v < frame.height)
    col = np.zeros(len(cloud), dtype=np.int64)
    row = np.zeros(len(cloud), dtype=np.int64)
    col[inside] = np.floor(u[inside]).astype(np.int64)
    row[inside] = np.floor(v[inside]).astype(np.int64)
    pixel = np.where(inside, row * frame.width + col, -1)

    d = frame.depth.ravel()[np.where(inside, pixel, 0)].astype(np.float64)
    visible = inside & (d > 0) & (np.abs(z - d) <= depth_tol)
    pixel.setflags(write=False)
    visible.setflags(write=False)
    out = FrameVisibility(visible, pixel)
    per_frame[key] = (cloud, out)
    return out


def lift_mask2d(mask: Mask2D, frame: CameraFrame, cloud: PointCloud,
                depth_tol: float = DEPTH_TOL, z_near: float = Z_NEAR) -> InstanceMask:
    """Cloud points that are visible in ``frame`` and land on a pixel of ``mask``."""
    if depth_tol <= 0:
        raise ValueError("depth_tol must be positive")
    if mask.frame_id != frame.frame_id:
        raise FormatError(f"mask for frame {mask.frame_id!r} lifted through frame {frame.frame_id!r}")
    if (mask.width, mask.height) != (frame.width, frame.height):
        raise DimensionMismatch(
            f"mask is {mask.width}x{mask.height}, frame is {frame.width}x{frame.height}")
    vis = frame_visibility(cloud, frame, depth_tol, z_near)
    flags = mask.to_bool().ravel()
    cand = np.flatnonzero(vis.visible)
    hits = cand[flags[vis.pixel[cand]]]
    if hits.size == 0:
        raise EmptyLift(f"mask {mask.id!r} in frame {frame.frame_id!r} covers no visible point")
    return InstanceMask(hits, check=False)


def visibility_count(mask: InstanceMask, frame: CameraFrame, cloud: PointCloud,
                     depth_tol: float = DEPTH_TOL, z_near: float = Z_NEAR) -> int:
    vis = frame_visibility(cloud, frame, depth_tol, z_near)
    return int(np.count_nonzero(vis.visible[mask.indices]))


def top_k_frames(mask: InstanceMask, frames: Sequence[CameraFrame], cloud: PointCloud, k: int,
                 depth_tol: float = DEPTH_TOL, z_near: float = Z_NEAR) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = [(visibility_count(mask, f, cloud, depth_tol, z_near), f.frame_id) for f in frames]
    ranked = sorted((c for c in counts if c[0] > 0), key=lambda c: (-c[0], c[1]))
    if not ranked:
        raise NoVisibleFrame(f"{mask!r} is not visible in any of {len(frames)} frames")
    return [fid for _, fid in ranked[:k]]


def _expand(frame_id: str, width: int, height: int, u0: int, v0: int, u1: int, v1: int,
            levels: int, expansion: float) -> list[CropBox]:
    bw, bh = u1 - u0, v1 - v0
    crops = []
    for level in range(levels):
        e = level * expansion
        crops.append(CropBox(
            frame_id,
            max(0, math.floor(u0 - e * bw)),
            max(0, math.floor(v0 - e * bh)),
            min(width, math.ceil(u1 + e * bw)),
            min(height, math.ceil(v1 + e * bh)),
            level,
        ))
    return crops


def _base_box(us: np.ndarray, vs: np.ndarray, width: int, height: int):
    lo_u, hi_u = float(us.min()), float(us.max())
    lo_v, hi_v = float(vs.min()), float(vs.max())
    if hi_u < 0 or lo_u >= width or hi_v < 0 or lo_v >= height:
        return None
    u0 = min(max(math.floor(lo_u), 0), width - 1)
    v0 = min(max(math.floor(lo_v), 0), height - 1)
    u1 = max(min(math.floor(hi_u) + 1, width), u0 + 1)
    v1 = max(min(math.floor(hi_v) + 1, height), v0 + 1)
    return u0, v0, u1, v1


def bbox3d_to_crop(mask: InstanceMask, cloud: PointCloud, frame: CameraFrame,
                   levels: int = CROP_LEVELS, expansion: float = CROP_EXPANSION,
                   z_near: float = Z_NEAR) -> list[CropBox]:
    """Multi-level crops around the image footprint of the mask's world-space bounding box.

    Level 0 is the 2D bbox of the eight projected corners, clamped to the image.
    Level ``l`` grows each side by ``l * expansion`` of the level-0 width/height.
    When a corner falls behind the camera its projection is meaningless, so the
    footprint falls back to the mask points that do project into the frame.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pts = cloud.positions[mask.indices]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    u, v, z = pinhole(world_to_camera(corners, frame), frame)
    box = None
    if np.all(z > z_near):
        box = _base_box(u, v, frame.width, frame.height)
    else:
        u, v, z = pinhole(world_to_camera(pts, frame), frame)
        ok = (z > z_near) & (u >= 0) & (u < frame.width) & (v >= 0) & (v < frame.height)
        if ok.any():
            box = _base_box(u[ok], v[ok], frame.width, frame.height)
    if box is None:
        raise NoProjection(f"{mask!r} does not project into frame {frame.frame_id!r}")
    return _expand(frame.frame_id, frame.width, frame.height, *box, levels, expansion)


def mask2d_crops(mask: Mask2D, levels: int = CROP_LEVELS,
                 expansion: float = CROP_EXPANSION) -> list[CropBox]:
    """Multi-level crops around the pixel bounding box of a 2D mask."""
    pix = mask.pixel_indices()
    if pix.size == 0:
        raise NoProjection(f"2D mask {mask.id!r} is empty")
    rows, cols = np.divmod(pix, mask.width)
    return _expand(mask.frame_id, mask.width, mask.height, int(cols.min()), int(rows.min()),
                   int(cols.max()) + 1, int(rows.max()) + 1, levels, expansion)
