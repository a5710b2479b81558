"""Per-mask feature assembly, query ranking, and crop-feature providers."""
from __future__ import annotations

import hashlib
import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .errors import ProviderError
from .masks import InstanceMask
from .projection import (CROP_EXPANSION, CROP_LEVELS, DEPTH_TOL, Z_NEAR, CropBox,
                         bbox3d_to_crop, top_k_frames)
from .scene import DEFAULT_FEATURE_DIM, CameraFrame, PointCloud, ProposalSet, normalize

log = logging.getLogger(__name__)

TOP_K = 5


def _seed_from(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_embed(text: str, d: int = DEFAULT_FEATURE_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed on ``(text, d, seed)``.

    Stands in for a text encoder: distinct strings give nearly orthogonal
    vectors in high dimension, identical strings give identical vectors.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(_seed_from("hash_embed", seed, d, text))
    while True:
        v = rng.standard_normal(d)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


class FeatureProvider(Protocol):
    dim: int

    def features(self, crops: Sequence[CropBox]) -> np.ndarray:
        """One row per crop, in request order."""
        ...


class HashProvider:
    """Feature per crop derived from the crop geometry alone. Stateless."""

    def __init__(self, dim: int = DEFAULT_FEATURE_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def features(self, crops):
        out = np.zeros((len(crops), self.dim))
        for i, c in enumerate(crops):
            key = f"{c.frame_id}|{c.u_min},{c.v_min},{c.u_max},{c.v_max}|{c.level}"
            out[i] = hash_embed(key, self.dim, self.seed)
        return out


class PrecomputedProvider:
    """Serves vectors computed offline for a previously exported crop request file."""

    def __init__(self, crops: Sequence[CropBox], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(crops):
            raise ProviderError(f"{vectors.shape[0]} vectors for {len(crops)} crop requests")
        self.dim = vectors.shape[1]
        self._table = {c: vectors[i] for i, c in enumerate(crops)}

    def features(self, crops):
        missing = [c for c in crops if c not in self._table]
        if missing:
            raise ProviderError("no precomputed feature for crop", crop=missing[0])
        return np.stack([self._table[c] for c in crops]) if crops else np.zeros((0, self.dim))


class SubprocessProvider:
    """File-exchange seam for an external encoder.

    The command receives two arguments, a JSON-lines crop request file and the
    path where it must write a DPFV response with one record per request line.
    """

    def __init__(self, command: str | Sequence[str], dim: int = DEFAULT_FEATURE_DIM,
                 timeout: float | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.dim = dim
        self.timeout = timeout

    def features(self, crops):
        from . import io  # io imports projection; keep module import order acyclic

        if not crops:
            return np.zeros((0, self.dim))
        with tempfile.TemporaryDirectory() as tmp:
            req, resp = Path(tmp) / "crops.jsonl", Path(tmp) / "features.dpfv"
            io.save_crops(req, [("", c) for c in crops])
            proc = subprocess.run([*self.command, str(req), str(resp)], capture_output=True,
                                  text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise ProviderError(f"feature command exited {proc.returncode}: {proc.stderr.strip()}",
                                    crop=crops[0])
            return io.load_dpfv(resp)


def _call_provider(provider: FeatureProvider, crops: Sequence[CropBox], owner: str) -> np.ndarray:
    try:
        out = np.asarray(provider.features(list(crops)), dtype=np.float64)
    except ProviderError as exc:
        raise ProviderError(f"{owner}: {exc}", crop=exc.crop) from exc
    except Exception as exc:
        raise ProviderError(f"{owner}: provider failed ({exc!r})", crop=crops[0]) from exc
    if out.shape != (len(crops), provider.dim):
        raise ProviderError(f"{owner}: provider returned shape {out.shape} for {len(crops)} crops",
                            crop=crops[0])
    if not np.all(np.isfinite(out)):
        raise ProviderError(f"{owner}: provider returned non-finite values", crop=crops[0])
    return out


def pool_features(vectors: np.ndarray) -> np.ndarray:
    """Unweighted mean of crop features, renormalized."""
    return normalize(np.asarray(vectors, dtype=np.float64).mean(axis=0))


def mask_crops(mask: InstanceMask, cloud: PointCloud, frames: Sequence[CameraFrame], k: int = TOP_K,
               levels: int = CROP_LEVELS, expansion: float = CROP_EXPANSION,
               depth_tol: float = DEPTH_TOL, z_near: float = Z_NEAR) -> list[CropBox]:
    by_id = {f.frame_id: f for f in frames}
    crops: list[CropBox] = []
    for fid in top_k_frames(mask, frames, cloud, k, depth_tol, z_near):
        crops.extend(bbox3d_to_crop(mask, cloud, by_id[fid], levels, expansion, z_near))
    return crops


def assemble_mask_feature(mask: InstanceMask, cloud: PointCloud, frames: Sequence[CameraFrame],
                          provider: FeatureProvider, k: int = TOP_K, levels: int = CROP_LEVELS,
                          expansion: float = CROP_EXPANSION, depth_tol: float = DEPTH_TOL,
                          z_near: float = Z_NEAR, owner: str = "mask") -> np.ndarray:
    """Top-``k`` views x ``levels`` crops -> provider -> mean pooled unit vector."""
    crops = mask_crops(mask, cloud, frames, k, levels, expansion, depth_tol, z_near)
    return pool_features(_call_provider(provider, crops, owner))


def crop_features(crops: Sequence[CropBox], provider: FeatureProvider, owner: str = "mask") -> np.ndarray:
    return pool_features(_call_provider(provider, crops, owner))


class QueryResult(NamedTuple):
    hits: list[tuple[str, float]]
    skipped: list[str]


def rank_by_query(pset: ProposalSet, query: np.ndarray, top_n: int | None = None) -> QueryResult:
    """Cosine ranking of proposals against a query feature; stable on ties."""
    q = normalize(query)
    scored, skipped = [], []
    for order, p in enumerate(pset):
        if p.feature is None:
            skipped.append(p.id)
            continue
        if p.feature.size != q.size:
            raise ValueError(f"query dim {q.size} != feature dim {p.feature.size}")
        scored.append((-float(q @ normalize(p.feature)), order, p.id))
    if skipped:
        log.info("rank_by_query skipped %d feature-less proposals", len(skipped))
    scored.sort()
    if top_n is not None:
        scored = scored[:top_n]
    return QueryResult([(pid, -neg) for neg, _, pid in scored], skipped)
