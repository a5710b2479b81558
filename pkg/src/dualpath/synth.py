"""Synthetic rooms with exact ground truth and pathway-specific corruption.

A room is a floor plus four walls sampled as points, with axis-aligned boxes
(instances) standing on the floor. A ring of cameras looks at the room centre;
depth is rendered by a 1-pixel point-splat z-buffer so it agrees exactly with
the projection predicate. The 3D pathway sees whole boxes but misses rare
classes, has noisy borders and sometimes fuses touching neighbours; the 2D
pathway sees every class but only per view, occasionally split into
overlapping fragments, and some objects' masks spill onto the room behind.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import ConfigError, InfeasiblePacking
from .features import _seed_from, hash_embed
from .masks import InstanceMask
from .projection import CropBox, Mask2D
from .scene import (DEFAULT_FEATURE_DIM, SUBSETS, CameraFrame, ClassInfo, GroundTruth, GTInstance,
                    PointCloud, Proposal, ProposalSet, Scene, Source, normalize)

BACKGROUND = "background"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_points: int = 40000
    n_instances: int = 12
    n_classes: int = 6  # split evenly into head / common / tail; several instances per class
    room: tuple = (7.0, 7.0, 3.0)
    object_radius: float = 1.8  # boxes are placed within this distance of the room centre
    cell: float = 0.9
    box_size: tuple = (0.35, 0.8)
    box_height: tuple = (0.3, 1.1)
    background_fraction: float = 0.5
    # cameras
    n_frames: int = 24
    frame_step: int = 10  # frame ids advance by this much, mimicking a subsampled recording
    width: int = 128
    height: int = 96
    focal: float = 110.0
    ring_radius: float = 3.1
    camera_height: float = 1.8
    target_height: float = 0.4
    # corruption
    miss_rate: dict = field(default_factory=lambda: {"head": 0.0, "common": 0.1, "tail": 0.6})
    boundary_noise: float = 0.02
    fragment_count: int = 2
    fragment_overlap: float = 0.2
    fragment_rate: float = 0.1  # chance a single detection is split into fragments
    bleed_rate_2d: float = 0.3  # chance an instance's 2D masks spill onto the surfaces around it
    bleed_px: int = 40
    merge_rate_3d: float = 0.3  # chance an instance is fused with its nearest neighbour in 3D
    merge_gap: float = 0.25  # neighbours must lie within this distance (m) to be fused
    detect_rate_2d: float = 0.85
    min_pixels_2d: int = 12
    feature_noise: float = 0.6  # radians of angular perturbation per crop
    feature_dim: int = DEFAULT_FEATURE_DIM
    text_seed: int = 0

    def __post_init__(self):
        if isinstance(self.room, list):
            object.__setattr__(self, "room", tuple(self.room))
        for name in ("box_size", "box_height"):
            val = getattr(self, name)
            if isinstance(val, list):
                object.__setattr__(self, name, tuple(val))
        rates = [self.boundary_noise, self.merge_rate_3d, self.bleed_rate_2d, self.fragment_overlap, self.fragment_rate, self.detect_rate_2d,
                 self.background_fraction, *self.miss_rate.values()]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError("synthetic corruption rates must lie in [0, 1]")
        if set(self.miss_rate) - set(SUBSETS):
            raise ConfigError(f"miss_rate keys must be among {SUBSETS}")
        if self.n_points < 1 or self.n_instances < 0 or self.n_classes < 3:
            raise ConfigError("need n_points >= 1, n_instances >= 0, n_classes >= 3")
        if self.fragment_count < 1 or self.n_frames < 1 or self.bleed_px < 0:
            raise ConfigError("fragment_count and n_frames must be >= 1 and bleed_px >= 0")

    def replace(self, **changes) -> "SynthConfig":
        known = {f.name for f in fields(self)}
        bad = set(changes) - known
        if bad:
            raise ConfigError(f"unknown synth keys {sorted(bad)}")
        return SynthConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})


@dataclass(eq=False)
class SynthScene:
    scene: Scene
    class_features: dict[int, np.ndarray]
    point_instance: np.ndarray  # (N,) GT instance index or -1 for background
    instance_maps: dict[str, np.ndarray]  # frame_id -> (H, W) GT instance index per pixel, -1 if none
    config: SynthConfig

    @property
    def gt(self) -> GroundTruth:
        return self.scene.gt


def class_table(n_classes: int) -> dict[int, ClassInfo]:
    per = [n_classes // 3 + (1 if k < n_classes % 3 else 0) for k in range(3)]
    table, cid = {}, 0
    for subset, count in zip(SUBSETS, per):
        for k in range(count):
            table[cid] = ClassInfo(f"{subset}_{k:02d}", subset)
            cid += 1
    return table


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera pose for a camera at ``eye`` facing ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    fwd = normalize(target - eye)
    right = normalize(np.cross(fwd, up))
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = -R @ eye
    return pose


def _sample_rect(rng, n, origin, u, v):
    a, b = rng.random(n), rng.random(n)
    return origin + a[:, None] * u + b[:, None] * v


def _box_faces(lo, hi):
    """Side and top faces of an axis-aligned box as (origin, u, v) triples."""
    dx, dy, dz = hi - lo
    ex, ey, ez = np.array([dx, 0, 0]), np.array([0, dy, 0]), np.array([0, 0, dz])
    return [
        (lo, ex, ez), (lo + ey, ex, ez),
        (lo, ey, ez), (lo + ex, ey, ez),
        (lo + ez, ex, ey),
    ]


def _distribute(rng, total, areas):
    areas = np.asarray(areas, dtype=np.float64)
    if total == 0 or areas.sum() == 0:
        return np.zeros(areas.size, dtype=np.int64)
    return rng.multinomial(total, areas / areas.sum())


def _place_boxes(rng, cfg: SynthConfig):
    cx, cy = cfg.room[0] / 2, cfg.room[1] / 2
    r = cfg.object_radius
    steps = np.arange(-r, r + 1e-9, cfg.cell)
    cells = [(cx + x, cy + y) for x in steps for y in steps if np.hypot(x, y) <= r]
    if cfg.n_instances > len(cells):
        raise InfeasiblePacking(
            f"{cfg.n_instances} instances do not fit in {len(cells)} cells of {cfg.cell} m")
    if cfg.box_size[1] >= cfg.cell:
        raise InfeasiblePacking("box_size upper bound must be smaller than the cell size")
    chosen = rng.choice(len(cells), size=cfg.n_instances, replace=False)
    boxes = []
    for k in sorted(chosen.tolist()):
        x, y = cells[k]
        sx, sy = rng.uniform(*cfg.box_size, size=2)
        sz = rng.uniform(*cfg.box_height)
        # jitter within the cell while staying clear of neighbours
        jx = rng.uniform(-1, 1) * (cfg.cell - sx) / 2 * 0.8
        jy = rng.uniform(-1, 1) * (cfg.cell - sy) / 2 * 0.8
        lo = np.array([x + jx - sx / 2, y + jy - sy / 2, 0.0])
        boxes.append((lo, lo + np.array([sx, sy, sz])))
    return boxes


def camera_ring(cfg: SynthConfig) -> list[tuple[str, np.ndarray, np.ndarray]]:
    cx, cy = cfg.room[0] / 2, cfg.room[1] / 2
    K = np.array([[cfg.focal, 0, cfg.width / 2], [0, cfg.focal, cfg.height / 2], [0, 0, 1.0]])
    out = []
    for k in range(cfg.n_frames):
        a = 2 * np.pi * k / cfg.n_frames
        eye = (cx + cfg.ring_radius * np.cos(a), cy + cfg.ring_radius * np.sin(a), cfg.camera_height)
        out.append((f"{k * cfg.frame_step:06d}", K, look_at(eye, (cx, cy, cfg.target_height))))
    return out


def render(positions: np.ndarray, point_label: np.ndarray, K: np.ndarray, pose: np.ndarray,
           width: int, height: int):
    """Nearest-point z-buffer: ``(depth in metres quantised to mm, label of the winning point)``."""
    cam = positions @ pose[:3, :3].T + pose[:3, 3]
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * cam[:, 0] / z + K[0, 2]
        v = K[1, 1] * cam[:, 1] / z + K[1, 2]
    ok = (z > 1e-4) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    idx = np.flatnonzero(ok)
    pix = np.floor(v[idx]).astype(np.int64) * width + np.floor(u[idx]).astype(np.int64)
    order = np.lexsort((z[idx], pix))
    pix_sorted = pix[order]
    first = np.concatenate(([True], pix_sorted[1:] != pix_sorted[:-1]))
    winners = idx[order[first]]
    win_pix = pix_sorted[first]
    depth = np.zeros(width * height, dtype=np.float32)
    mm = np.round(z[winners] * 1000.0)
    depth[win_pix] = (mm / 1000.0).astype(np.float32)
    labels = np.full(width * height, -1, dtype=np.int64)
    labels[win_pix] = point_label[winners]
    return depth.reshape(height, width), labels.reshape(height, width)


def generate_scene(config: SynthConfig = SynthConfig()) -> SynthScene:
    cfg = config
    rng = np.random.default_rng(_seed_from("scene", cfg.seed))
    table = class_table(cfg.n_classes)
    boxes = _place_boxes(rng, cfg)

    n_bg = int(round(cfg.n_points * (cfg.background_fraction if boxes else 1.0)))
    n_obj = cfg.n_points - n_bg
    Lx, Ly, Lz = cfg.room
    room_faces = [
        (np.zeros(3), np.array([Lx, 0, 0]), np.array([0, Ly, 0])),
        (np.zeros(3), np.array([Lx, 0, 0]), np.array([0, 0, Lz])),
        (np.array([0, Ly, 0]), np.array([Lx, 0, 0]), np.array([0, 0, Lz])),
        (np.zeros(3), np.array([0, Ly, 0]), np.array([0, 0, Lz])),
        (np.array([Lx, 0, 0]), np.array([0, Ly, 0]), np.array([0, 0, Lz])),
    ]
    chunks, labels = [], []
    for (o, u, v), n in zip(room_faces, _distribute(rng, n_bg, [np.linalg.norm(np.cross(u, v))
                                                                  for o, u, v in room_faces])):
        chunks.append(_sample_rect(rng, n, o, u, v))
        labels.append(np.full(n, -1))
    box_faces = [_box_faces(lo, hi) for lo, hi in boxes]
    box_area = [sum(np.linalg.norm(np.cross(u, v)) for _, u, v in faces) for faces in box_faces]
    for k, (faces, n) in enumerate(zip(box_faces, _distribute(rng, n_obj, box_area))):
        per_face = _distribute(rng, int(n), [np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
        for (o, u, v), m in zip(faces, per_face):
            chunks.append(_sample_rect(rng, int(m), o, u, v))
            labels.append(np.full(int(m), k))
    positions = np.concatenate(chunks).astype(np.float32).astype(np.float64)
    point_instance = np.concatenate(labels).astype(np.int64)

    # instance classes: cycle subsets so every subset appears once there are >= 3 boxes
    subsets = [SUBSETS[k % 3] for k in range(len(boxes))]
    subsets = [subsets[k] for k in rng.permutation(len(boxes))]
    instances = []
    for k, subset in enumerate(subsets):
        members = [c for c, info in table.items() if info.subset == subset]
        cid = int(rng.choice(members))
        idx = np.flatnonzero(point_instance == k)
        if idx.size == 0:
            raise InfeasiblePacking(f"instance {k} received no points; raise n_points")
        instances.append(GTInstance(f"gt_{k:03d}", InstanceMask(idx, check=False), cid))

    cloud = PointCloud(positions)
    frames, maps = [], {}
    for fid, K, pose in camera_ring(cfg):
        depth, lab = render(cloud.positions, point_instance, K, pose, cfg.width, cfg.height)
        frames.append(CameraFrame(fid, K, pose, cfg.width, cfg.height, depth))
        maps[fid] = lab
    gt = GroundTruth(instances, table)
    feats = {c: hash_embed(info.name, cfg.feature_dim, cfg.text_seed) for c, info in table.items()}
    scene = Scene(cloud, frames, gt, name=f"synth_{cfg.seed:04d}")
    return SynthScene(scene, feats, point_instance, maps, cfg)


def _boundary_noise(rng, mask_idx: np.ndarray, positions: np.ndarray, point_instance: np.ndarray,
                    k: int, rate: float) -> np.ndarray:
    """Swap ``rate`` of an instance's points for the nearest foreign points around its bbox."""
    m = int(round(rate * mask_idx.size))
    if m == 0:
        return mask_idx
    pts = positions[mask_idx]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    # drop the points closest to the floor contact line (lowest z), a typical 3D border error
    keep = mask_idx[np.argsort(pts[:, 2], kind="stable")[m:]]
    others = np.flatnonzero(point_instance != k)
    d = np.linalg.norm(np.maximum(np.maximum(lo - positions[others], positions[others] - hi), 0), axis=1)
    d = d + 1e-6 * rng.random(d.size)
    add = others[np.argsort(d, kind="stable")[:m]]
    return np.union1d(keep, add)


def _merge_pairs(rng, gt: GroundTruth, positions: np.ndarray, rate: float, gap: float) -> dict[int, int]:
    """Pick disjoint pairs of nearby instances that the 3D pathway fails to separate."""
    if rate <= 0:
        return {}
    boxes = [(positions[g.mask.indices].min(axis=0), positions[g.mask.indices].max(axis=0))
             for g in gt.instances]
    partner: dict[int, int] = {}
    for a in range(len(boxes)):
        if a in partner or rng.random() >= rate:
            continue
        best, best_d = None, gap
        for b in range(len(boxes)):
            if b == a or b in partner:
                continue
            d = np.linalg.norm(np.maximum(np.maximum(boxes[a][0] - boxes[b][1], boxes[b][0] - boxes[a][1]), 0))
            if d <= best_d:
                best, best_d = b, d
        if best is not None:
            partner[a], partner[best] = best, a
    return partner


def corrupt_to_pathways(synth: SynthScene, config: SynthConfig | None = None):
    """Derive both pathways' raw inputs from ground truth.

    Returns ``(set3d, masks2d)`` where ``set3d`` is a feature-less, score-less
    3D proposal set and ``masks2d`` maps frame id to that frame's 2D masks.
    """
    cfg = config or synth.config
    rng = np.random.default_rng(_seed_from("corrupt", cfg.seed))
    gt, table = synth.gt, synth.gt.class_table
    positions = synth.scene.cloud.positions
    partner = _merge_pairs(rng, gt, positions, cfg.merge_rate_3d, cfg.merge_gap)
    props = []
    for k, inst in enumerate(gt.instances):
        subset = table[inst.class_id].subset
        if rng.random() < cfg.miss_rate.get(subset, 0.0) or partner.get(k, k) < k:
            continue
        idx = _boundary_noise(rng, inst.mask.indices.astype(np.int64), positions,
                              synth.point_instance, k, cfg.boundary_noise)
        if k in partner:
            idx = np.union1d(idx, gt.instances[partner[k]].mask.indices)
        props.append(Proposal(f"3d_{len(props):04d}", InstanceMask(idx, check=False), None, Source.PATH3D))
    set3d = ProposalSet(synth.scene.num_points, props)

    bleeds = rng.random(len(gt.instances)) < cfg.bleed_rate_2d
    masks2d: dict[str, list[Mask2D]] = {}
    for frame in synth.scene.frames:
        lab = synth.instance_maps[frame.frame_id]
        out = []
        for k, inst in enumerate(gt.instances):
            pix = lab == k
            if pix.sum() < cfg.min_pixels_2d or rng.random() >= cfg.detect_rate_2d:
                continue
            name = table[inst.class_id].name
            if bleeds[k] and cfg.bleed_px:
                pix = pix | (binary_dilation(pix, iterations=cfg.bleed_px) & (lab < 0))
            count = cfg.fragment_count if rng.random() < cfg.fragment_rate else 1
            for frag in _fragments(pix, count, cfg.fragment_overlap):
                if frag.sum() < cfg.min_pixels_2d:
                    continue
                out.append(Mask2D.from_bool(frame.frame_id, frag, id=f"{frame.frame_id}_{len(out):03d}",
                                            label=name, confidence=round(float(rng.uniform(0.3, 1.0)), 4)))
        masks2d[frame.frame_id] = out
    return set3d, masks2d


def _fragments(pix: np.ndarray, count: int, overlap: float) -> list[np.ndarray]:
    """Split a pixel mask into ``count`` vertical strips that overlap by ``overlap`` of a strip."""
    if count == 1:
        return [pix]
    cols = np.flatnonzero(pix.any(axis=0))
    c0, c1 = cols.min(), cols.max() + 1
    width = (c1 - c0) / count
    grid = np.arange(pix.shape[1])
    out = []
    for s in range(count):
        a = c0 + s * width - overlap * width
        b = c0 + (s + 1) * width + overlap * width
        out.append(pix & ((grid >= a) & (grid < b))[None, :])
    return out


class SceneFeatureProvider:
    """Crop features for a synthetic scene, standing in for an image encoder.

    The instance covering most pixels of the crop determines the class; its
    text feature is rotated by ``feature_noise`` radians in a random direction
    seeded by the crop geometry. Crops that show no instance return the
    background feature.
    """

    def __init__(self, synth: SynthScene, noise: float | None = None, seed: int | None = None):
        self.synth = synth
        self.dim = synth.config.feature_dim
        self.noise = synth.config.feature_noise if noise is None else noise
        self.seed = synth.config.seed if seed is None else seed
        self._bg = hash_embed(BACKGROUND, self.dim, synth.config.text_seed)

    def _one(self, crop: CropBox) -> np.ndarray:
        lab = self.synth.instance_maps[crop.frame_id][crop.v_min:crop.v_max, crop.u_min:crop.u_max]
        ids = lab[lab >= 0]
        if ids.size == 0:
            base = self._bg
        else:
            k = int(np.argmax(np.bincount(ids)))
            base = self.synth.class_features[self.synth.gt.instances[k].class_id]
        if self.noise == 0:
            return base.copy()
        rng = np.random.default_rng(_seed_from("crop", self.seed, crop.frame_id, crop.u_min,
                                               crop.v_min, crop.u_max, crop.v_max, crop.level))
        r = rng.standard_normal(self.dim)
        r -= (r @ base) * base
        r = normalize(r)
        return np.cos(self.noise) * base + np.sin(self.noise) * r

    def features(self, crops: Sequence[CropBox]) -> np.ndarray:
        out = np.zeros((len(crops), self.dim))
        for i, c in enumerate(crops):
            out[i] = self._one(c)
        return out


def attach_synthetic(scene: Scene, config: SynthConfig = SynthConfig()) -> SynthScene:
    """Rebuild the render-side bookkeeping for a synthetic scene loaded from disk."""
    if scene.gt is None:
        raise ValueError("synthetic feature provider needs ground truth")
    point_instance = np.full(scene.num_points, -1, dtype=np.int64)
    for k, inst in enumerate(scene.gt.instances):
        point_instance[inst.mask.indices] = k
    maps = {}
    for f in scene.frames:
        _, maps[f.frame_id] = render(scene.cloud.positions, point_instance, f.intrinsics, f.pose,
                                     f.width, f.height)
    feats = {c: hash_embed(info.name, config.feature_dim, config.text_seed)
             for c, info in scene.gt.class_table.items()}
    return SynthScene(scene, feats, point_instance, maps, config)
