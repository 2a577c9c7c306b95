"""Compressor family and index-set diagnostics.

The family covers exact magnitude top-k, chunked quasi top-k, shared
random-k, identity, the true-top-k oracle (top-k of the averaged
error-feedback gradient), and the cyclic-leader variant in which each
iteration's support comes from one worker's local top-k. Also provides the
symmetric-difference distance between supports, measured contraction
ratios, and a brute-force expectation oracle for the contraction bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np

from .core import IndexSet, RngStream, SparseGradient, UndefinedMetricError, as_vector

# Support-selection policies. All of them produce one shared support per
# iteration; per-worker divergent supports would break the sparse all-reduce.
IDENTITY = "identity"
CYCLIC_TOPK = "cyclic-topk"
CHUNKED_TOPK = "chunked-topk"
FIXED_LOCAL_TOPK = "fixed-local-topk"
RANDOM_K = "random-k"
TRUE_TOPK = "true-topk"

_KINDS = (IDENTITY, CYCLIC_TOPK, CHUNKED_TOPK, FIXED_LOCAL_TOPK, RANDOM_K, TRUE_TOPK)


@dataclass(frozen=True)
class CompressorKind:
    """Which support-selection rule the simulator applies each iteration."""

    kind: str
    chunks: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}; expected one of {_KINDS}")
        if self.chunks < 1:
            raise ValueError("chunks must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "CompressorKind":
        """Parse CLI spellings like 'cyclic-topk' or 'chunked-topk:16'."""
        name, _, arg = text.partition(":")
        if name == CHUNKED_TOPK:
            return cls(CHUNKED_TOPK, chunks=int(arg) if arg else 8)
        if arg:
            raise ValueError(f"compressor {name!r} takes no argument")
        return cls(name)

    def label(self) -> str:
        if self.kind == CHUNKED_TOPK:
            return f"{self.kind}:{self.chunks}"
        return self.kind


def top_k_indices(v: np.ndarray, k: int) -> IndexSet:
    """Indices of the k largest-magnitude entries; ties go to the lowest index."""
    v = as_vector(v)
    p = v.size
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range for dimension {p}")
    order = np.argsort(-np.abs(v), kind="stable")[:k]
    return IndexSet(np.sort(order))


def chunked_top_k_indices(v: np.ndarray, k: int, chunks: int) -> IndexSet:
    """Quasi top-k: per-chunk quota of ceil(k * chunk_len / p), trimmed back
    to exactly k globally by magnitude (lowest-index ties).

    With chunks=1 this is exactly :func:`top_k_indices`.
    """
    v = as_vector(v)
    p = v.size
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range for dimension {p}")
    if not 1 <= chunks <= p:
        raise ValueError(f"chunks={chunks} out of range for dimension {p}")
    if chunks == 1:
        return top_k_indices(v, k)

    candidates = []
    for block in np.array_split(np.arange(p), chunks):
        quota = min(block.size, math.ceil(k * block.size / p))
        if quota == 0:
            continue
        local = np.argsort(-np.abs(v[block]), kind="stable")[:quota]
        candidates.append(block[np.sort(local)])
    cand = np.concatenate(candidates)
    # Global trim: keep the k largest magnitudes among candidates.
    keep = np.argsort(-np.abs(v[cand]), kind="stable")[:k]
    return IndexSet(np.sort(cand[keep]))


def sparsify(v: np.ndarray, support: IndexSet) -> SparseGradient:
    """Restrict a vector to a support (the shared-index compression step)."""
    v = as_vector(v)
    support.validate_for(v.size)
    return SparseGradient(support=support, values=v[support.indices].copy(), p=v.size)


def random_k_indices(p: int, k: int, rng: RngStream) -> IndexSet:
    """k distinct positions drawn uniformly without replacement."""
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range for dimension {p}")
    return IndexSet(np.sort(rng.choice_without_replacement(p, k)))


def hamming_distance(i1: IndexSet, i2: IndexSet) -> int:
    """Size of the symmetric difference between two equal-size supports (= 2d)."""
    if i1.k != i2.k:
        raise ValueError(f"index sets differ in size: {i1.k} vs {i2.k}")
    shared = np.intersect1d(i1.indices, i2.indices, assume_unique=True).size
    return 2 * (i1.k - int(shared))


def index_recall(candidate: IndexSet, exact: IndexSet) -> float:
    """Fraction of the exact support recovered by the candidate support."""
    if exact.k == 0:
        raise ValueError("exact support is empty")
    shared = np.intersect1d(candidate.indices, exact.indices, assume_unique=True).size
    return shared / exact.k


@dataclass(frozen=True)
class ContractionEstimate:
    """Measured energy-loss ratios for one compression event.

    gamma  : ||y - comp(y)||^2 / ||y||^2 for the applied support
    gamma0 : same ratio when the support is the exact top-k of y
    d_over_k : normalized symmetric-difference distance between the two supports
    """

    gamma: float
    gamma0: float
    d_over_k: float

    @property
    def flagged(self) -> bool:
        # gamma can only exceed 1 through floating-point accumulation noise.
        return self.gamma > 1.0


def measure_contraction(y: np.ndarray, support: IndexSet) -> ContractionEstimate:
    """Per-sample contraction of sparsifying y on the given support."""
    y = as_vector(y)
    energy = float(np.dot(y, y))
    if energy == 0.0:
        raise UndefinedMetricError("contraction undefined for the zero vector")
    support.validate_for(y.size)
    k = support.k
    kept = float(np.dot(y[support.indices], y[support.indices]))
    exact = top_k_indices(y, k)
    kept0 = float(np.dot(y[exact.indices], y[exact.indices]))
    return ContractionEstimate(
        gamma=(energy - kept) / energy,
        gamma0=(energy - kept0) / energy,
        d_over_k=hamming_distance(exact, support) / (2 * k),
    )


class OracleEstimate(NamedTuple):
    value: float
    stderr: float
    cases: int
    exhaustive: bool


def expected_residual_oracle(
    y: np.ndarray,
    k: int,
    d: int,
    rng: RngStream | None = None,
    exhaustive_limit: int = 10**6,
    mc_samples: int = 10**5,
) -> OracleEstimate:
    """Expected residual energy when y is sparsified by a support at
    symmetric-difference distance 2d from its own top-k.

    Averages ||y||^2 - sum(y_i^2 over retained top-k indices) over every
    (k-d)-subset of the top-k set that could survive, scoring only the
    energy retained inside the top-k set (the off-top-k pickups of the
    follower support are discarded, which makes this the worst case over
    placements of the d replacement indices). The exhaustive mean equals
    ||y||^2 - ((k-d)/k) * sum(y_i^2 over top-k) exactly.

    Falls back to Monte-Carlo sampling (reporting a standard error) when
    the number of subset combinations exceeds ``exhaustive_limit``.
    """
    y = as_vector(y)
    p = y.size
    if not 0 <= d <= k:
        raise ValueError(f"d={d} out of range for k={k}")
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range for dimension {p}")
    energy = float(np.dot(y, y))
    if energy == 0.0:
        raise UndefinedMetricError("residual expectation undefined for the zero vector")

    top = top_k_indices(y, k).indices
    top_sq = y[top] ** 2
    keep = k - d

    n_cases = math.comb(k, keep)
    if n_cases <= exhaustive_limit:
        residuals = np.array(
            [energy - top_sq[list(subset)].sum() for subset in combinations(range(k), keep)]
        )
        return OracleEstimate(float(residuals.mean()), 0.0, n_cases, True)

    if rng is None:
        rng = RngStream(0, stream=0)
    samples = np.empty(mc_samples)
    for i in range(mc_samples):
        subset = rng.choice_without_replacement(k, keep)
        samples[i] = energy - top_sq[subset].sum()
    stderr = float(samples.std(ddof=1) / math.sqrt(mc_samples))
    return OracleEstimate(float(samples.mean()), stderr, mc_samples, False)
