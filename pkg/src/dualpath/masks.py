"""Sparse point-index masks and the set algebra used by every fusion stage.

A mask is a strictly increasing ``uint32`` array of point indices. Pairwise
operations switch to packed 64-bit bitsets when either operand is denser than
``DENSE_FRACTION`` of the cloud, since popcount over words beats a sorted merge
once masks cover a sizeable share of the scene.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyMask, IndexOutOfRange, NonMonotoneIndices

DENSE_FRACTION = 1.0 / 32.0


class InstanceMask:
    __slots__ = ("_idx", "_bits", "_hash")

    def __init__(self, indices, *, check: bool = True):
        arr = np.asarray(indices)
        if arr.ndim != 1:
            raise ValueError(f"mask indices must be 1-D, got shape {arr.shape}")
        if arr.size == 0:
            raise EmptyMask("instance masks may not be empty")
        if check:
            if arr.dtype.kind not in "iu":
                if arr.dtype.kind == "f" and np.all(arr == np.floor(arr)):
                    arr = arr.astype(np.int64)
                else:
                    raise ValueError(f"mask indices must be integers, got {arr.dtype}")
            if arr.dtype.kind == "i" and arr[0] < 0:
                raise IndexOutOfRange(f"negative point index {int(arr.min())}")
            if arr.size > 1 and not np.all(arr[1:] > arr[:-1]):
                raise NonMonotoneIndices("mask indices must be strictly increasing")
            if int(arr[-1]) > np.iinfo(np.uint32).max:
                raise IndexOutOfRange(f"point index {int(arr[-1])} exceeds u32")
        idx = np.ascontiguousarray(arr, dtype=np.uint32)
        idx.setflags(write=False)
        self._idx = idx
        self._bits = None
        self._hash = None

    @classmethod
    def from_unsorted(cls, values: Iterable[int]) -> "InstanceMask":
        arr = values if isinstance(values, np.ndarray) else np.fromiter(values, dtype=np.int64)
        return cls(np.unique(arr))

    @classmethod
    def from_bool(cls, flags) -> "InstanceMask":
        return cls(np.flatnonzero(np.asarray(flags, dtype=bool)), check=False)

    @property
    def indices(self) -> np.ndarray:
        return self._idx

    @property
    def max_index(self) -> int:
        return int(self._idx[-1])

    def __len__(self) -> int:
        return int(self._idx.size)

    def __iter__(self):
        return iter(self._idx.tolist())

    def __contains__(self, item) -> bool:
        pos = np.searchsorted(self._idx, item)
        return bool(pos < self._idx.size and self._idx[pos] == item)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return self._idx.size == other._idx.size and bool(np.array_equal(self._idx, other._idx))

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(self._idx.tobytes())
        return self._hash

    def __repr__(self) -> str:
        if len(self) <= 6:
            body = ", ".join(map(str, self._idx.tolist()))
        else:
            head = ", ".join(map(str, self._idx[:3].tolist()))
            body = f"{head}, ..., {self.max_index}"
        return f"InstanceMask([{body}], n={len(self)})"

    def to_bool(self, n: int) -> np.ndarray:
        if self.max_index >= n:
            raise IndexOutOfRange(f"index {self.max_index} out of range for {n} points")
        out = np.zeros(n, dtype=bool)
        out[self._idx] = True
        return out

    def bitset(self, n: int) -> np.ndarray:
        """Packed little-endian bitset of ``ceil(n / 64)`` words (cached per ``n``)."""
        if self._bits is not None and self._bits[0] == n:
            return self._bits[1]
        nbytes = -(-n // 64) * 8
        packed = np.packbits(self.to_bool(n), bitorder="little")
        buf = np.zeros(nbytes, dtype=np.uint8)
        buf[: packed.size] = packed
        words = buf.view(np.uint64)
        words.setflags(write=False)
        self._bits = (n, words)
        return words


def _is_dense(a: InstanceMask, b: InstanceMask, n: int | None) -> bool:
    return n is not None and max(len(a), len(b)) > n * DENSE_FRACTION


def _bits_to_mask(words: np.ndarray, n: int) -> InstanceMask:
    flags = np.unpackbits(words.view(np.uint8), bitorder="little")[:n]
    return InstanceMask.from_bool(flags)


def mask_intersection_count(a: InstanceMask, b: InstanceMask, n: int | None = None) -> int:
    """``|a & b|``. Pass the cloud size ``n`` to enable the dense bitset path."""
    if _is_dense(a, b, n):
        return int(np.bitwise_count(a.bitset(n) & b.bitset(n)).sum())
    small, large = (a.indices, b.indices) if len(a) <= len(b) else (b.indices, a.indices)
    if small[-1] < large[0] or large[-1] < small[0]:
        return 0
    pos = np.searchsorted(large, small)
    hit = pos < large.size
    return int(np.count_nonzero(large[pos[hit]] == small[hit]))


def mask_union(a: InstanceMask, b: InstanceMask, n: int | None = None) -> InstanceMask:
    if a is b or a == b:
        return a
    if _is_dense(a, b, n):
        return _bits_to_mask(a.bitset(n) | b.bitset(n), n)
    return InstanceMask(np.union1d(a.indices, b.indices), check=False)


def mask_intersection(a: InstanceMask, b: InstanceMask) -> np.ndarray:
    """Shared indices as a (possibly empty) sorted array; masks cannot be empty."""
    return np.intersect1d(a.indices, b.indices, assume_unique=True)


def mask_iou(a: InstanceMask, b: InstanceMask, n: int | None = None) -> float:
    inter = mask_intersection_count(a, b, n)
    return inter / (len(a) + len(b) - inter)


def runs_from_indices(indices: np.ndarray) -> np.ndarray:
    """Run-length encode sorted unique indices as an ``(R, 2)`` array of (start, length)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [idx.size]))
    return np.stack([idx[starts], ends - starts], axis=1)


def indices_from_runs(runs, limit: int | None = None) -> np.ndarray:
    """Expand (start, length) runs; runs must be ordered and non-overlapping."""
    runs = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
    if runs.size == 0:
        return np.zeros(0, dtype=np.int64)
    starts, lens = runs[:, 0], runs[:, 1]
    if np.any(lens <= 0) or np.any(starts < 0):
        raise NonMonotoneIndices("RLE runs must have non-negative starts and positive lengths")
    if np.any(starts[1:] < starts[:-1] + lens[:-1]):
        raise NonMonotoneIndices("RLE runs overlap or are out of order")
    if limit is not None and starts[-1] + lens[-1] > limit:
        raise IndexOutOfRange(f"index out of range: run ends at {starts[-1] + lens[-1]} > {limit}")
    offsets = np.repeat(starts - np.concatenate(([0], np.cumsum(lens)[:-1])), lens)
    return np.arange(int(lens.sum()), dtype=np.int64) + offsets


def _incidence(masks: Sequence[InstanceMask], n: int) -> sp.csr_matrix:
    lengths = np.fromiter((len(m) for m in masks), dtype=np.int64, count=len(masks))
    indptr = np.zeros(len(masks) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    if masks:
        cols = np.concatenate([m.indices for m in masks]).astype(np.int64)
    else:
        cols = np.zeros(0, dtype=np.int64)
    data = np.ones(cols.size, dtype=np.int32)
    return sp.csr_matrix((data, cols, indptr), shape=(len(masks), n))


def intersection_matrix(rows: Sequence[InstanceMask], cols: Sequence[InstanceMask],
                        n: int) -> np.ndarray:
    """Dense ``len(rows) x len(cols)`` matrix of exact intersection counts."""
    if not rows or not cols:
        return np.zeros((len(rows), len(cols)), dtype=np.int64)
    for m in (*rows, *cols):
        if m.max_index >= n:
            raise IndexOutOfRange(f"index {m.max_index} out of range for {n} points")
    prod = _incidence(rows, n) @ _incidence(cols, n).T
    return np.asarray(prod.toarray(), dtype=np.int64)
