"""End-to-end multi-worker training loop with shared-support gradient
compression, plus an uncompressed baseline and a virtual-sequence
diagnostic.

Each iteration: every worker computes a stochastic gradient, one leader
(cycling by default) publishes a support, every worker transmits its
error-feedback gradient restricted to that support, the sparse values are
averaged in fixed ascending worker order, memories absorb the filtered
residual, and the shared parameters take an SGD step. Warm-up iterations
run uncompressed (full support), during which memories stay exactly zero.

The reference execution is sequential over workers in ascending index and
bitwise reproducible from (config, seed). An optional thread-parallel mode
computes worker gradients concurrently but still reduces in ascending
order; each worker owns its random stream, so results are unchanged.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .compress import (
    CHUNKED_TOPK,
    CYCLIC_TOPK,
    FIXED_LOCAL_TOPK,
    IDENTITY,
    RANDOM_K,
    TRUE_TOPK,
    CompressorKind,
    chunked_top_k_indices,
    measure_contraction,
    random_k_indices,
    sparsify,
    top_k_indices,
)
from .core import IndexSet, RngStream, SparseGradient, densify, mean_of
from .feedback import ErrorFeedbackMemory, residual_input, update_memory
from .metrics import magnitude_histogram, memory_similarity, mean_offdiagonal, spearman_rho
from .problems import Problem

COMPRESSOR_STREAM = 1_000_000  # rng stream id reserved for support draws


class ConfigError(ValueError):
    """Invalid simulation configuration."""


class DivergenceError(RuntimeError):
    """Training diverged; carries the failing iteration and partial records."""

    def __init__(self, iteration: int, reason: str, records: list):
        super().__init__(f"diverged at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason
        self.records = records


@dataclass(frozen=True)
class LrSchedule:
    """Constant or linear-warmup-then-linear-decay step size."""

    kind: str = "constant"
    warmup: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "warmup-linear-decay"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if self.warmup < 0:
            raise ConfigError("lr warmup must be >= 0")

    def at(self, t: int, total: int, alpha: float) -> float:
        if self.kind == "constant":
            return alpha
        if t < self.warmup:
            return alpha * (t + 1) / self.warmup
        remaining = max(1, total - self.warmup)
        return alpha * (total - t) / remaining


@dataclass(frozen=True)
class LayerPartition:
    """A contiguous slice of the flat parameter vector with its own rate."""

    length: int
    rate: float

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError("partition length must be >= 1")
        if self.rate < 1:
            raise ConfigError("partition rate must be >= 1")

    @property
    def k(self) -> int:
        return max(1, math.ceil(self.length / self.rate))


@dataclass
class SimConfig:
    """Everything a run needs besides the problem's data."""

    problem: Problem
    workers: int
    alpha: float
    beta: float
    iterations: int
    seed: int
    k: int | None = None
    compression_rate: float | None = None
    warmup_steps: int = 0
    compressor: CompressorKind = field(default_factory=lambda: CompressorKind(CYCLIC_TOPK))
    batch_size: int = 8
    momentum: float = 0.0
    metric_stride: int = 1
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    partitions: list[LayerPartition] | None = None
    parallel_gradients: bool = False
    value_bytes: int = 4
    index_bytes: int = 4
    histogram_bins: int = 24
    problem_spec: dict | None = None

    def __post_init__(self):
        p = self.problem.p
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.metric_stride < 1:
            raise ConfigError("metric_stride must be >= 1")
        if self.value_bytes < 1 or self.index_bytes < 0:
            raise ConfigError("byte sizes must be positive")
        if self.partitions is not None:
            if sum(part.length for part in self.partitions) != p:
                raise ConfigError("partition lengths must sum to the problem dimension")
            if self.k is not None or self.compression_rate is not None:
                raise ConfigError("give either partitions or a global k/rate, not both")
        else:
            if self.k is None:
                rate = self.compression_rate if self.compression_rate is not None else 1.0
                if rate < 1:
                    raise ConfigError("compression_rate must be >= 1")
                self.k = max(1, math.ceil(p / rate))
            if not 1 <= self.k <= p:
                raise ConfigError(f"k={self.k} out of range for dimension {p}")

    def segments(self) -> list[tuple[int, int, int]]:
        """(start, stop, k) for each compressed slice of the parameter vector."""
        if self.partitions is None:
            return [(0, self.problem.p, int(self.k))]
        out, start = [], 0
        for part in self.partitions:
            out.append((start, start + part.length, part.k))
            start += part.length
        return out

    def total_k(self) -> int:
        return sum(k for _, _, k in self.segments())


@dataclass
class WorkerState:
    memory: ErrorFeedbackMemory
    rng: RngStream


@dataclass
class IterationRecord:
    """One trace line. Heavy diagnostics are None off the metric stride and
    during warm-up where they are undefined."""

    t: int
    leader: int
    loss: float
    grad_norm_sq: float | None = None
    gamma: float | None = None
    gamma0: float | None = None
    d_over_k: float | None = None
    mem_cosine_mean: float | None = None
    spearman: float | None = None
    virtual_residual: float | None = None
    k_effective: int = 0
    upload_bytes: int = 0
    download_bytes: int = 0
    index_bytes: int = 0
    batch_digest: str = ""
    hist_edges: list[float] | None = None
    hist_counts: list[int] | None = None
    hist_zeros: int | None = None

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for key, value in out.items():
            if isinstance(value, float) and math.isnan(value):
                out[key] = None
        return out


@dataclass
class TrainingTrace:
    records: list[IterationRecord]
    final_theta: np.ndarray
    algorithm: str
    summary: dict

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict()) + "\n")


class StepResult(NamedTuple):
    theta: np.ndarray
    states: list[WorkerState]
    record: IterationRecord
    velocity: np.ndarray | None
    mean_grad: np.ndarray
    max_grad_norm: float


def leader_schedule(t: int, n: int) -> int:
    """Cyclic leader: worker t mod n publishes the support at iteration t."""
    if n < 1:
        raise ValueError("need at least one worker")
    return t % n


def virtual_sequence_residual(
    theta: np.ndarray, virtual: np.ndarray, mean_memory: np.ndarray, alpha: float, beta: float
) -> float:
    """Norm gap of the identity  theta - v = (alpha / beta) * mean memory,
    normalized by max(1, ||theta||). Zero in exact arithmetic."""
    gap = (theta - virtual) - (alpha / beta) * mean_memory
    return float(np.linalg.norm(gap)) / max(1.0, float(np.linalg.norm(theta)))


def _batch_digest(batches) -> str:
    h = hashlib.sha1()
    for batch in batches:
        h.update(batch.indices.tobytes())
    return h.hexdigest()[:12]


def _compute_gradients(prob, theta, states, batch_size, parallel):
    if parallel and len(states) > 1:
        def work(state):
            batch = prob.sample_batch(state.rng, batch_size)
            return batch, prob.stochastic_gradient(theta, batch)

        with ThreadPoolExecutor(max_workers=len(states)) as pool:
            results = list(pool.map(work, states))
        return [r[0] for r in results], [r[1] for r in results]
    batches, grads = [], []
    for state in states:
        batch = prob.sample_batch(state.rng, batch_size)
        batches.append(batch)
        grads.append(prob.stochastic_gradient(theta, batch))
    return batches, grads


def _select_support(cfg: SimConfig, t: int, ef_grads: list[np.ndarray], rng: RngStream) -> IndexSet:
    kind = cfg.compressor
    n = cfg.workers
    pieces = []
    mean_ef = mean_of(ef_grads) if kind.kind == TRUE_TOPK else None
    for start, stop, k_seg in cfg.segments():
        k_seg = min(k_seg, stop - start)
        if kind.kind == CYCLIC_TOPK:
            local = top_k_indices(ef_grads[leader_schedule(t, n)][start:stop], k_seg)
        elif kind.kind == CHUNKED_TOPK:
            chunks = min(kind.chunks, stop - start)
            local = chunked_top_k_indices(
                ef_grads[leader_schedule(t, n)][start:stop], k_seg, chunks
            )
        elif kind.kind == FIXED_LOCAL_TOPK:
            local = top_k_indices(ef_grads[0][start:stop], k_seg)
        elif kind.kind == TRUE_TOPK:
            local = top_k_indices(mean_ef[start:stop], k_seg)
        elif kind.kind == RANDOM_K:
            local = random_k_indices(stop - start, k_seg, rng)
        else:
            raise ConfigError(f"unsupported compressor kind {kind.kind!r}")
        pieces.append(local.indices + start)
    return IndexSet(np.concatenate(pieces))


class SupportMismatchError(ValueError):
    """A sparse payload arrived on a different support than the broadcast one."""


def sparse_allreduce_mean(payloads: list[SparseGradient]) -> SparseGradient:
    """Sparse all-reduce: average aligned payload values in ascending worker
    order. Rejects payloads whose support or dimension differs from the
    broadcast support; the protocol only ever reduces, never gathers."""
    if not payloads:
        raise ValueError("nothing to reduce")
    head = payloads[0]
    for i, payload in enumerate(payloads[1:], start=1):
        if payload.p != head.p or payload.support != head.support:
            raise SupportMismatchError(f"worker {i} payload is not on the shared support")
    total = np.zeros(head.k, dtype=np.float64)
    for payload in payloads:
        total += payload.values
    return SparseGradient(support=head.support, values=total / len(payloads), p=head.p)


def step_scalecom(
    states: list[WorkerState],
    theta: np.ndarray,
    cfg: SimConfig,
    t: int,
    velocity: np.ndarray | None = None,
    compress_rng: RngStream | None = None,
    with_metrics: bool = True,
) -> StepResult:
    """One iteration of the compressed training loop."""
    prob = cfg.problem
    n = cfg.workers
    leader = leader_schedule(t, n)
    batches, grads = _compute_gradients(prob, theta, states, cfg.batch_size, cfg.parallel_gradients)
    ef_grads = [residual_input(state.memory, grad) for state, grad in zip(states, grads)]

    warmup = t < cfg.warmup_steps
    full_support = warmup or cfg.compressor.kind == IDENTITY
    if full_support:
        support = None
        mean_vec = mean_of(ef_grads)
        transmitted = ef_grads
        k_eff = prob.p
        idx_bytes = 0
    else:
        if compress_rng is None:
            compress_rng = RngStream(cfg.seed, stream=COMPRESSOR_STREAM)
        support = _select_support(cfg, t, ef_grads, compress_rng)
        payloads = [sparsify(ef, support) for ef in ef_grads]
        mean_vec = densify(sparse_allreduce_mean(payloads))
        transmitted = [densify(payload) for payload in payloads]
        k_eff = support.k
        idx_bytes = k_eff * cfg.index_bytes

    new_states = [
        WorkerState(memory=update_memory(state.memory, grad, sent), rng=state.rng)
        for state, grad, sent in zip(states, grads, transmitted)
    ]

    if cfg.momentum > 0.0:
        velocity = cfg.momentum * velocity + mean_vec if velocity is not None else mean_vec.copy()
        direction = velocity
    else:
        direction = mean_vec
    lr = cfg.lr_schedule.at(t, cfg.iterations, cfg.alpha)
    new_theta = theta - lr * direction

    record = IterationRecord(
        t=t,
        leader=leader,
        loss=float(prob.loss(theta)),
        k_effective=k_eff,
        upload_bytes=k_eff * cfg.value_bytes,
        download_bytes=k_eff * cfg.value_bytes,
        index_bytes=idx_bytes,
        batch_digest=_batch_digest(batches),
    )
    if with_metrics:
        full_grad = prob.full_gradient(theta)
        record.grad_norm_sq = float(np.dot(full_grad, full_grad))
        y = mean_of(ef_grads)
        if support is not None and float(np.dot(y, y)) > 0.0:
            est = measure_contraction(y, support)
            record.gamma = est.gamma
            record.gamma0 = est.gamma0
            record.d_over_k = est.d_over_k
        memories = [state.memory.values for state in new_states]
        mean_cos = mean_offdiagonal(memory_similarity(memories))
        record.mem_cosine_mean = None if math.isnan(mean_cos) else mean_cos
        if np.any(ef_grads[0]) and np.any(y):
            record.spearman = spearman_rho(np.abs(ef_grads[0]), np.abs(y))
        hist = magnitude_histogram(y, cfg.histogram_bins)
        record.hist_edges = [float(e) for e in hist.edges]
        record.hist_counts = [int(c) for c in hist.counts]
        record.hist_zeros = int(hist.zeros)

    max_grad = max(float(np.linalg.norm(g)) for g in grads)
    return StepResult(new_theta, new_states, record, velocity, mean_of(grads), max_grad)


def step_baseline_sgd(
    states: list[WorkerState],
    theta: np.ndarray,
    cfg: SimConfig,
    t: int,
    velocity: np.ndarray | None = None,
    with_metrics: bool = True,
) -> StepResult:
    """Uncompressed synchronous SGD consuming randomness exactly like the
    compressed step, so paired runs see identical mini-batches."""
    prob = cfg.problem
    batches, grads = _compute_gradients(prob, theta, states, cfg.batch_size, cfg.parallel_gradients)
    mean_grad = mean_of(grads)

    if cfg.momentum > 0.0:
        velocity = cfg.momentum * velocity + mean_grad if velocity is not None else mean_grad.copy()
        direction = velocity
    else:
        direction = mean_grad
    lr = cfg.lr_schedule.at(t, cfg.iterations, cfg.alpha)
    new_theta = theta - lr * direction

    record = IterationRecord(
        t=t,
        leader=leader_schedule(t, cfg.workers),
        loss=float(prob.loss(theta)),
        k_effective=prob.p,
        upload_bytes=prob.p * cfg.value_bytes,
        download_bytes=prob.p * cfg.value_bytes,
        index_bytes=0,
        batch_digest=_batch_digest(batches),
    )
    if with_metrics:
        full_grad = prob.full_gradient(theta)
        record.grad_norm_sq = float(np.dot(full_grad, full_grad))
    max_grad = max(float(np.linalg.norm(g)) for g in grads)
    return StepResult(new_theta, states, record, velocity, mean_grad, max_grad)


def _check_divergence(t, loss, grads, initial_loss, records):
    if not math.isfinite(loss):
        raise DivergenceError(t, "non-finite loss", records)
    ceiling = 1e6 * initial_loss if initial_loss > 0 else 1e6
    if loss > ceiling:
        raise DivergenceError(t, f"loss {loss:.3e} exceeded 1e6 x initial", records)
    for i, grad in enumerate(grads):
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(t, f"non-finite gradient at worker {i}", records)


def run(cfg: SimConfig, algorithm: str = "compressed") -> TrainingTrace:
    """Execute the configured run; deterministic given (config, seed).

    algorithm: "compressed" for the shared-support loop, "baseline" for
    uncompressed synchronous SGD on the same mini-batch stream.
    """
    if algorithm not in ("compressed", "baseline"):
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    prob = cfg.problem
    theta = np.zeros(prob.p, dtype=np.float64)
    virtual = theta.copy()
    states = [
        WorkerState(memory=ErrorFeedbackMemory.zeros(prob.p, cfg.beta), rng=RngStream(cfg.seed, stream=i))
        for i in range(cfg.workers)
    ]
    compress_rng = RngStream(cfg.seed, stream=COMPRESSOR_STREAM)
    velocity = None
    initial_loss = float(prob.loss(theta))
    constant_lr = cfg.lr_schedule.kind == "constant"

    records: list[IterationRecord] = []
    totals = {"upload_bytes": 0, "download_bytes": 0, "index_bytes": 0}
    max_mean_mem_sq = 0.0
    max_worker_grad_norm = 0.0
    gammas, d_over_ks = [], []

    for t in range(cfg.iterations):
        with_metrics = (t % cfg.metric_stride == 0) or (t == cfg.iterations - 1)
        if algorithm == "compressed":
            result = step_scalecom(
                states, theta, cfg, t,
                velocity=velocity, compress_rng=compress_rng, with_metrics=with_metrics,
            )
        else:
            result = step_baseline_sgd(
                states, theta, cfg, t, velocity=velocity, with_metrics=with_metrics
            )
        theta, states, record, velocity, mean_grad, max_grad = result
        max_worker_grad_norm = max(max_worker_grad_norm, max_grad)

        lr = cfg.lr_schedule.at(t, cfg.iterations, cfg.alpha)
        virtual = virtual - lr * mean_grad
        if algorithm == "compressed":
            mean_mem = mean_of([state.memory.values for state in states])
            if with_metrics:
                max_mean_mem_sq = max(max_mean_mem_sq, float(np.dot(mean_mem, mean_mem)))
                if constant_lr:
                    record.virtual_residual = virtual_sequence_residual(
                        theta, virtual, mean_mem, cfg.alpha, cfg.beta
                    )

        totals["upload_bytes"] += record.upload_bytes
        totals["download_bytes"] += record.download_bytes
        totals["index_bytes"] += record.index_bytes
        if record.gamma is not None:
            gammas.append(record.gamma)
        if record.d_over_k is not None:
            d_over_ks.append(record.d_over_k)
        if with_metrics:
            records.append(record)
        _check_divergence(t, record.loss, [mean_grad], initial_loss, records)

    final_grad = prob.full_gradient(theta)
    summary = {
        "algorithm": algorithm,
        "iterations": cfg.iterations,
        "workers": cfg.workers,
        "k": cfg.total_k(),
        "beta": cfg.beta,
        "alpha": cfg.alpha,
        "compressor": cfg.compressor.label(),
        "final_loss": float(prob.loss(theta)),
        "final_grad_norm_sq": float(np.dot(final_grad, final_grad)),
        "mean_gamma": float(np.mean(gammas)) if gammas else None,
        "mean_d_over_k": float(np.mean(d_over_ks)) if d_over_ks else None,
        "max_mean_memory_norm_sq": max_mean_mem_sq,
        "max_worker_grad_norm": max_worker_grad_norm,
        "per_worker_upload_bytes": totals["upload_bytes"],
        "per_worker_download_bytes": totals["download_bytes"],
        "index_bytes": totals["index_bytes"],
    }
    return TrainingTrace(records=records, final_theta=theta, algorithm=algorithm, summary=summary)


def run_paired(cfg: SimConfig) -> tuple[TrainingTrace, TrainingTrace]:
    """Compressed run and uncompressed baseline on identical mini-batch
    streams (same seed, same per-worker draw pattern)."""
    return run(cfg, algorithm="compressed"), run(cfg, algorithm="baseline")
