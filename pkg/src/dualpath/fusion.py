"""Memory-bank fusion of lifted per-frame instances into scene-level 3D proposals.

Each frame's lifted instances are merged into at most one existing entry
(the highest-IoU entry that also passes the feature test). Transitive merging
is left to :func:`periodic_compact`, which collapses connected components of
the "IoU and cosine both above threshold" graph until nothing changes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .masks import InstanceMask, intersection_matrix, mask_intersection_count
from .scene import Proposal, ProposalSet, Source, normalize


@dataclass(frozen=True)
class FusionConfig:
    iou_merge: float = 0.25
    feat_merge: float = 0.75
    merge_period: int = 30
    min_points: int = 50
    min_frames: int = 2
    frame_stride: int = 10

    def __post_init__(self):
        if not 0.0 <= self.iou_merge <= 1.0:
            raise ConfigError(f"iou_merge={self.iou_merge} not in [0, 1]")
        if not -1.0 <= self.feat_merge <= 1.0:
            raise ConfigError(f"feat_merge={self.feat_merge} not in [-1, 1]")
        for name in ("merge_period", "frame_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.min_points < 0 or self.min_frames < 0:
            raise ConfigError("min_points and min_frames must be >= 0")


@dataclass(frozen=True, eq=False)
class BankEntry:
    mask: InstanceMask
    feature: np.ndarray
    frames: frozenset
    last_update: int
    order: int  # first-seen sequence number, used for tie-breaks

    @property
    def frames_seen(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class MemoryBank:
    num_points: int
    entries: tuple = ()
    next_order: int = 0
    ingested: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def _merge_entries(group: Sequence[BankEntry], n: int) -> BankEntry:
    if len(group) == 1:
        return group[0]
    idx = np.unique(np.concatenate([e.mask.indices for e in group]))
    weights = np.array([e.frames_seen for e in group], dtype=np.float64)
    feat = normalize((weights[:, None] * np.stack([e.feature for e in group])).sum(axis=0))
    return BankEntry(
        InstanceMask(idx, check=False),
        feat,
        frozenset().union(*(e.frames for e in group)),
        max(e.last_update for e in group),
        min(e.order for e in group),
    )


def ingest_frame(bank: MemoryBank, lifted: Iterable[tuple[InstanceMask, np.ndarray]],
                 frame_index: int, config: FusionConfig = FusionConfig()) -> MemoryBank:
    """Merge or append each lifted ``(mask, unit feature)`` of one frame.

    Instances are only matched against entries that existed before this frame,
    so two detections in the same image never merge with each other here.
    """
    n = bank.num_points
    entries = list(bank.entries)
    n_prior = len(entries)
    order = bank.next_order
    for mask, feat in lifted:
        feat = normalize(feat)
        best, best_iou = -1, -1.0
        for k in range(n_prior):
            e = entries[k]
            inter = mask_intersection_count(mask, e.mask, n)
            if inter == 0:
                continue
            iou = inter / (len(mask) + len(e.mask) - inter)
            if iou >= config.iou_merge and float(feat @ e.feature) >= config.feat_merge and iou > best_iou:
                best, best_iou = k, iou
        if best < 0:
            entries.append(BankEntry(mask, feat, frozenset([frame_index]), frame_index, order))
            order += 1
            continue
        e = entries[best]
        w = e.frames_seen
        entries[best] = BankEntry(
            InstanceMask(np.union1d(e.mask.indices, mask.indices), check=False),
            normalize(w * e.feature + feat),
            e.frames | {frame_index},
            frame_index,
            e.order,
        )
    return MemoryBank(n, tuple(entries), order, bank.ingested + 1)


def _components(edges: np.ndarray) -> list[list[int]]:
    parent = list(range(edges.shape[0]))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in zip(*np.nonzero(edges)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(edges.shape[0]):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def merge_graph(entries: Sequence[BankEntry], n: int, config: FusionConfig) -> np.ndarray:
    """Upper-triangular boolean adjacency of entry pairs passing both merge tests."""
    masks = [e.mask for e in entries]
    inter = intersection_matrix(masks, masks, n)
    sizes = np.array([len(m) for m in masks], dtype=np.float64)
    iou = inter / (sizes[:, None] + sizes[None, :] - inter)
    feats = np.stack([e.feature for e in entries])
    cos = feats @ feats.T
    edges = (inter > 0) & (iou >= config.iou_merge) & (cos >= config.feat_merge)
    return np.triu(edges, k=1)


def periodic_compact(bank: MemoryBank, config: FusionConfig = FusionConfig(),
                     final: bool = False) -> MemoryBank:
    """Merge to a fixed point, then drop small (and, when ``final``, rarely seen) entries."""
    entries = list(bank.entries)
    while len(entries) > 1:
        edges = merge_graph(entries, bank.num_points, config)
        if not edges.any():
            break
        entries = [_merge_entries([entries[i] for i in g], bank.num_points)
                   for g in _components(edges)]
    entries = [e for e in entries if len(e.mask) >= config.min_points
               and (not final or e.frames_seen >= config.min_frames)]
    return replace(bank, entries=tuple(entries))


def finalize_bank(bank: MemoryBank, config: FusionConfig = FusionConfig(),
                  prefix: str = "2d_") -> ProposalSet:
    bank = periodic_compact(bank, config, final=True)
    ranked = sorted(bank.entries, key=lambda e: (-len(e.mask), e.order))
    props = [Proposal(f"{prefix}{k:04d}", e.mask, normalize(e.feature), Source.PATH2D)
             for k, e in enumerate(ranked)]
    return ProposalSet(bank.num_points, props, props[0].feature.size if props else None)


def frame_number(frame_id: str, position: int) -> int:
    """Numeric frame index from an id like ``"000120"``; falls back to sequence position."""
    try:
        return int(frame_id)
    except ValueError:
        return position


def fuse_sequence(lifted_frames: Sequence[tuple[str, Sequence[tuple[InstanceMask, np.ndarray]]]],
                  num_points: int, config: FusionConfig = FusionConfig()) -> ProposalSet:
    """Run the whole bank over ordered ``(frame_id, lifted instances)`` pairs.

    Frames whose index is not a multiple of ``frame_stride`` are skipped;
    compaction runs every ``merge_period`` ingested frames and once at the end.
    """
    bank = MemoryBank(num_points)
    for pos, (fid, lifted) in enumerate(lifted_frames):
        index = frame_number(fid, pos)
        if index % config.frame_stride:
            continue
        bank = ingest_frame(bank, lifted, index, config)
        if bank.ingested % config.merge_period == 0:
            bank = periodic_compact(bank, config)
    return finalize_bank(bank, config)
