"""Core domain types shared across stages."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError, IndexOutOfRange, ZeroVector
from .masks import InstanceMask

DEFAULT_FEATURE_DIM = 768
SUBSETS = ("head", "common", "tail")


class Source(str, enum.Enum):
    PATH3D = "3d"
    PATH2D = "2d"
    MERGED = "merged"


def normalize(v: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm < eps:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def is_unit(v: np.ndarray, tol: float = 1e-6) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray  # (N, 3) world frame, meters
    colors: np.ndarray | None = None  # (N, 3) uint8, carried but unused

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] == 0:
            raise FormatError(f"point cloud must be a non-empty (N, 3) array, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise FormatError("point cloud contains non-finite coordinates")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class Proposal:
    id: str
    mask: InstanceMask
    feature: np.ndarray | None = None
    source: Source = Source.PATH3D
    score: float | None = None
    class_id: int | None = None

    def __post_init__(self):
        if self.feature is not None:
            f = np.asarray(self.feature, dtype=np.float64)
            if f.ndim != 1 or not np.all(np.isfinite(f)):
                raise FormatError(f"proposal {self.id}: feature must be a finite 1-D vector")
            f.setflags(write=False)
            object.__setattr__(self, "feature", f)
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise FormatError(f"proposal {self.id}: score {self.score} outside [0, 1]")
        object.__setattr__(self, "source", Source(self.source))

    def with_(self, **changes) -> "Proposal":
        return replace(self, **changes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Proposal):
            return NotImplemented
        if (self.id, self.source, self.score, self.class_id) != (
                other.id, other.source, other.score, other.class_id):
            return False
        if self.mask != other.mask:
            return False
        if (self.feature is None) != (other.feature is None):
            return False
        return self.feature is None or bool(np.array_equal(self.feature, other.feature))

    __hash__ = None


@dataclass(eq=False)
class ProposalSet:
    num_points: int
    proposals: list[Proposal] = field(default_factory=list)
    feature_dim: int | None = None

    def __post_init__(self):
        self.proposals = list(self.proposals)
        if self.num_points <= 0:
            raise FormatError("num_points must be positive")
        seen = set()
        for p in self.proposals:
            if p.id in seen:
                raise FormatError(f"duplicate proposal id {p.id!r}")
            seen.add(p.id)
            if p.mask.max_index >= self.num_points:
                raise IndexOutOfRange(
                    f"proposal {p.id}: index out of range ({p.mask.max_index} >= {self.num_points})")
            if p.feature is not None:
                if self.feature_dim is None:
                    self.feature_dim = p.feature.size
                elif p.feature.size != self.feature_dim:
                    raise DimensionMismatch(
                        f"proposal {p.id}: dimension mismatch ({p.feature.size} != {self.feature_dim})")

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self) -> Iterator[Proposal]:
        return iter(self.proposals)

    def __getitem__(self, i) -> Proposal:
        return self.proposals[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProposalSet):
            return NotImplemented
        return (self.num_points == other.num_points
                and self.feature_dim == other.feature_dim
                and len(self) == len(other)
                and all(a == b for a, b in zip(self, other)))

    @property
    def masks(self) -> list[InstanceMask]:
        return [p.mask for p in self.proposals]

    def ids(self) -> list[str]:
        return [p.id for p in self.proposals]

    def derive(self, proposals: Sequence[Proposal]) -> "ProposalSet":
        return ProposalSet(self.num_points, list(proposals), self.feature_dim)


@dataclass(frozen=True, eq=False)
class CameraFrame:
    frame_id: str
    intrinsics: np.ndarray  # 3x3 pixels
    pose: np.ndarray  # 4x4 world -> camera
    width: int
    height: int
    depth: np.ndarray  # (height, width) meters, 0 = invalid

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        E = np.asarray(self.pose, dtype=np.float64)
        D = np.asarray(self.depth, dtype=np.float32)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise FormatError(f"frame {self.frame_id}: bad intrinsics/pose shapes {K.shape} {E.shape}")
        if D.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"frame {self.frame_id}: depth is {D.shape}, expected {(self.height, self.width)}")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0 and 0 <= cx < self.width and 0 <= cy < self.height):
            raise FormatError(f"frame {self.frame_id}: invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")
        R = E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5, rtol=0) or not np.allclose(
                E[3], [0, 0, 0, 1], atol=1e-9):
            raise FormatError(f"frame {self.frame_id}: pose is not a rigid transform")
        for arr in (K, E, D):
            arr.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "pose", E)
        object.__setattr__(self, "depth", D)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])


@dataclass(frozen=True)
class ClassInfo:
    name: str
    subset: str

    def __post_init__(self):
        if self.subset not in SUBSETS:
            raise FormatError(f"class {self.name!r}: unknown subset {self.subset!r}")


@dataclass(frozen=True, eq=False)
class GTInstance:
    id: str
    mask: InstanceMask
    class_id: int


@dataclass(eq=False)
class GroundTruth:
    instances: list[GTInstance]
    class_table: dict[int, ClassInfo]

    def __post_init__(self):
        for inst in self.instances:
            if inst.class_id not in self.class_table:
                raise FormatError(f"GT instance {inst.id}: class {inst.class_id} not in class table")

    def classes_in(self, subset: str) -> list[int]:
        return sorted(c for c, info in self.class_table.items() if info.subset == subset)


@dataclass(eq=False)
class Scene:
    cloud: PointCloud
    frames: list[CameraFrame]
    gt: GroundTruth | None = None
    name: str = "scene"

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate frame ids")
        if self.gt is not None:
            for inst in self.gt.instances:
                if inst.mask.max_index >= len(self.cloud):
                    raise IndexOutOfRange(f"GT instance {inst.id}: index out of range")

    @property
    def num_points(self) -> int:
        return len(self.cloud)

    def frame(self, frame_id: str) -> CameraFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)
