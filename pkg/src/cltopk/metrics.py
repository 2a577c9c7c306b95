"""Similarity and distribution diagnostics over memories, error-feedback
gradients, and their supports: pairwise cosine distances, support overlap
against the true top-k, log-scale magnitude histograms, rank correlation,
and paired quantiles with a least-squares fit quality.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compress import hamming_distance, top_k_indices
from .core import IndexSet, RngStream, UndefinedMetricError, as_vector, cosine_distance, mean_of


def memory_similarity(memories: Sequence[np.ndarray]) -> np.ndarray:
    """Symmetric matrix of pairwise cosine distances between worker
    memories. Entries involving a zero-norm memory are NaN (undefined)."""
    n = len(memories)
    out = np.zeros((n, n), dtype=np.float64)
    norms = [float(np.linalg.norm(m)) for m in memories]
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                out[i, j] = out[j, i] = np.nan
            else:
                out[i, j] = out[j, i] = cosine_distance(memories[i], memories[j])
    return out


def mean_offdiagonal(matrix: np.ndarray) -> float:
    """NaN-aware mean of the strict upper triangle; NaN if all undefined."""
    n = matrix.shape[0]
    if n < 2:
        return math.nan
    vals = matrix[np.triu_indices(n, k=1)]
    if np.all(np.isnan(vals)):
        return math.nan
    return float(np.nanmean(vals))


def overlap_vs_true_topk(
    ef_grads: Sequence[np.ndarray], leader_set: IndexSet, true_k: int | None = None
) -> tuple[float, float]:
    """(d/k, overlap) between a published support and the top entries of
    the averaged error-feedback gradient.

    true_k defaults to the leader set's size; with differing sizes the
    overlap is the fraction of leader picks falling inside the true set.
    """
    mean_ef = mean_of(list(ef_grads))
    k_local = leader_set.k
    if k_local == 0:
        raise ValueError("leader set is empty")
    k_true = k_local if true_k is None else int(true_k)
    true_set = top_k_indices(mean_ef, k_true)
    if k_true == k_local:
        d_over_k = hamming_distance(true_set, leader_set) / (2 * k_local)
    else:
        shared = np.intersect1d(true_set.indices, leader_set.indices, assume_unique=True).size
        d_over_k = 1.0 - shared / k_local
    return d_over_k, 1.0 - d_over_k


@dataclass(frozen=True)
class MagnitudeHistogram:
    """Log-spaced magnitude histogram; zeros are counted separately so the
    bin counts plus the zero bucket always sum to the vector length."""

    edges: np.ndarray
    counts: np.ndarray
    zeros: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.zeros


def magnitude_histogram(v: np.ndarray, bins: int) -> MagnitudeHistogram:
    """Histogram of |v| over log-spaced bins covering the positive range."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    v = as_vector(v)
    mags = np.abs(v)
    zeros = int(np.count_nonzero(mags == 0.0))
    positive = mags[mags > 0.0]
    if positive.size == 0:
        return MagnitudeHistogram(edges=np.empty(0), counts=np.zeros(0, dtype=np.int64), zeros=zeros)
    lo = float(positive.min())
    hi = float(positive.max())
    if lo == hi:
        lo, hi = lo / 2.0, hi * 2.0
    edges = np.geomspace(lo, hi, bins + 1)
    edges[0] = min(edges[0], lo)  # guard roundoff at the boundary
    edges[-1] = max(edges[-1], hi)
    counts, _ = np.histogram(positive, bins=edges)
    return MagnitudeHistogram(edges=edges, counts=counts.astype(np.int64), zeros=zeros)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # ties share the average rank
        i = j + 1
    return ranks


def spearman_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation (average ranks on ties), without a p-value."""
    x = as_vector(x)
    y = as_vector(y, p=x.size)
    if x.size < 3:
        raise ValueError("rank correlation needs at least 3 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("rank correlation undefined for constant input")
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def spearman_rank(
    x: np.ndarray,
    y: np.ndarray,
    permutations: int = 10_000,
    rng: RngStream | None = None,
    permutation_cutoff: int = 500,
) -> tuple[float, float]:
    """Rank correlation with a two-sided p-value.

    Short inputs get a permutation test (``permutations`` reshuffles of one
    argument's ranks); longer ones use the large-sample normal
    approximation z = rho * sqrt(len - 1).
    """
    x = as_vector(x)
    y = as_vector(y, p=x.size)
    rho = spearman_rho(x, y)
    n = x.size
    if n <= permutation_cutoff:
        if rng is None:
            rng = RngStream(0, stream=0)
        cx = _average_ranks(x)
        cy = _average_ranks(y)
        denom = n * cx.std() * cy.std()
        cx = cx - cx.mean()
        cy = cy - cy.mean()
        perms = np.stack([cy[rng.permutation(n)] for _ in range(permutations)])
        stats = np.abs(perms @ cx) / denom
        hits = int(np.count_nonzero(stats >= abs(rho) - 1e-12))
        p_value = (hits + 1) / (permutations + 1)
    else:
        z = abs(rho) * math.sqrt(n - 1)
        p_value = math.erfc(z / math.sqrt(2.0))
    return rho, float(p_value)


@dataclass(frozen=True)
class QQResult:
    """Paired quantiles of two magnitude samples plus the R^2 of their
    least-squares line, exported for external plotting."""

    quantiles_x: np.ndarray
    quantiles_y: np.ndarray
    r_squared: float


def qq_quantiles(x: np.ndarray, y: np.ndarray, num: int = 101) -> QQResult:
    if num < 3:
        raise ValueError("need at least 3 quantile points")
    x = as_vector(x)
    y = as_vector(y)
    qs = np.linspace(0.0, 1.0, num)
    qx = np.quantile(x, qs)
    qy = np.quantile(y, qs)
    vx = qx - qx.mean()
    vy = qy - qy.mean()
    denom = float(np.dot(vx, vx))
    if denom == 0.0:
        raise UndefinedMetricError("R^2 undefined for constant quantiles")
    slope = float(np.dot(vx, vy)) / denom
    resid = vy - slope * vx
    total = float(np.dot(vy, vy))
    r2 = 1.0 - float(np.dot(resid, resid)) / total if total > 0 else 1.0
    return QQResult(quantiles_x=qx, quantiles_y=qy, r_squared=r2)


def write_similarity_csv(matrix: np.ndarray, path) -> None:
    """n x n cosine-distance matrix; header names workers w0..w{n-1};
    undefined entries are left empty."""
    n = matrix.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["worker"] + [f"w{j}" for j in range(n)])
        for i in range(n):
            row = [f"w{i}"]
            for j in range(n):
                row.append("" if math.isnan(matrix[i, j]) else repr(float(matrix[i, j])))
            writer.writerow(row)


def write_histogram_csv(hist: MagnitudeHistogram, path) -> None:
    """Columns bin_index, lo, hi, count; the zero bucket is bin_index -1
    with lo = hi = 0."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_index", "lo", "hi", "count"])
        writer.writerow([-1, repr(0.0), repr(0.0), hist.zeros])
        for i, count in enumerate(hist.counts):
            writer.writerow([i, repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), int(count)])
