"""Foundational numeric types: dense vectors, index sets, sparse gradients,
and deterministic per-stream randomness.

All numerics are float64. Vectors are plain 1-D numpy arrays validated at
API boundaries by :func:`as_vector`; index sets and sparse gradients are
small immutable containers with their invariants enforced at construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Index payloads are modeled as 32-bit words, so dimensions stay below 2**31.
MAX_DIMENSION = 2**31


class DimensionError(ValueError):
    """Operands have incompatible dimensions."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (zero norm, constant vector, ...)."""


def as_vector(values, p: int | None = None) -> np.ndarray:
    """Validate and return a float64 1-D array.

    Rejects NaN/Inf entries and (optionally) a mismatched length.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if v.size > MAX_DIMENSION:
        raise DimensionError(f"dimension {v.size} exceeds the {MAX_DIMENSION} cap")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    if p is not None and v.size != p:
        raise DimensionError(f"expected dimension {p}, got {v.size}")
    return v


def check_same_length(*vectors: np.ndarray) -> int:
    lengths = {v.shape[0] for v in vectors}
    if len(lengths) != 1:
        raise DimensionError(f"mismatched vector lengths: {sorted(lengths)}")
    return lengths.pop()


@dataclass(frozen=True, eq=False)
class IndexSet:
    """A set of k distinct positions, stored sorted ascending."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("indices must be 1-D")
        if idx.size and idx[0] < 0:
            raise ValueError("negative index")
        if idx.size > 1:
            diffs = np.diff(idx)
            if np.any(diffs <= 0):
                raise ValueError("indices must be strictly increasing (sorted, no duplicates)")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "IndexSet":
        """Build from any iterable of distinct indices (sorts them)."""
        idx = np.asarray(sorted(indices), dtype=np.int64)
        return cls(idx)

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.k

    def __iter__(self):
        return iter(self.indices.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndexSet):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    def __repr__(self) -> str:
        return f"IndexSet({self.indices.tolist()})"

    def validate_for(self, p: int) -> None:
        if self.indices.size and self.indices[-1] >= p:
            raise ValueError(f"index {self.indices[-1]} out of range for dimension {p}")


@dataclass(frozen=True, eq=False)
class SparseGradient:
    """Values aligned index-for-index with a support, in ambient dimension p."""

    support: IndexSet
    values: np.ndarray
    p: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size != self.support.k:
            raise DimensionError(
                f"values length {vals.size} does not match support size {self.support.k}"
            )
        self.support.validate_for(self.p)
        object.__setattr__(self, "values", vals)

    @property
    def k(self) -> int:
        return self.support.k


def densify(s: SparseGradient) -> np.ndarray:
    """Embed a sparse gradient into a dense vector (zeros off the support)."""
    out = np.zeros(s.p, dtype=np.float64)
    out[s.support.indices] = s.values
    return out


def mean_of(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise arithmetic mean, accumulated in the given (ascending worker)
    order so reruns are bitwise identical."""
    if len(vectors) == 0:
        raise ValueError("mean_of requires a non-empty list")
    p = check_same_length(*vectors)
    total = np.zeros(p, dtype=np.float64)
    for v in vectors:
        total += v
    return total / len(vectors)


def cosine_distance(x: np.ndarray, y: np.ndarray) -> float:
    """1 - x.y / (|x| |y|), in [0, 2]. Undefined for zero-norm inputs."""
    check_same_length(x, y)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise UndefinedMetricError("cosine distance undefined for zero-norm vectors")
    # rounding can push |cos| a few ulp past 1; keep the distance in [0, 2]
    return min(2.0, max(0.0, 1.0 - float(np.dot(x, y)) / (nx * ny)))


class RngStream:
    """Deterministic random stream keyed by (seed, stream id).

    Two streams built from equal keys produce identical draw sequences on
    every platform; distinct stream ids give statistically independent
    streams from the same seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"
