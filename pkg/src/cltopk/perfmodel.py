"""Bandwidth-centric analytical step-time model.

Contrasts three communication schemes between n workers and a parameter
server:

  none       : full gradient up, reduced gradient down (both P values)
  local_topk : each worker picks its own top P/r values, so the server can
               only gather; the downlink carries n sparse payloads and the
               build-up grows linearly with n
  scalecom   : all workers share one support, so sparse payloads reduce;
               uplink/downlink carry P/r values plus one index broadcast,
               independent of n

Compute time is b * flops / (peak * efficiency) with a single fitted
efficiency scalar. Accounting is serial (compute + comm) by default,
matching stacked-bar presentations; a pipelined mode takes the max.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

SCHEMES = ("none", "local_topk", "scalecom")


@dataclass(frozen=True)
class SystemSpec:
    workers: int
    peak_flops: float           # per worker, FLOP/s
    efficiency: float = 0.5     # fraction of peak actually achieved
    bandwidth: float = 32e9     # worker <-> server, bytes/s
    value_bytes: float = 2.0    # wire size of one gradient value
    index_bytes: float = 4.0    # wire size of one index

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.peak_flops <= 0 or self.bandwidth <= 0:
            raise ValueError("peak compute and bandwidth must be positive")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")
        if self.value_bytes <= 0 or self.index_bytes < 0:
            raise ValueError("byte sizes must be non-negative (values positive)")


@dataclass(frozen=True)
class WorkloadSpec:
    flops_per_sample: float     # forward + backward
    gradient_size: int          # P, number of gradient values
    minibatch: int              # b, samples per worker per step
    rate: float = 1.0           # compression rate r
    scheme: str = "none"
    pipelined: bool = False

    def __post_init__(self):
        if self.flops_per_sample <= 0 or self.gradient_size < 1 or self.minibatch < 1:
            raise ValueError("workload sizes must be positive")
        if self.rate < 1:
            raise ValueError("compression rate must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass(frozen=True)
class PerfEstimate:
    scheme: str
    workers: int
    minibatch: int
    bandwidth: float
    compute_s: float
    upload_s: float
    download_s: float
    index_s: float
    total_s: float
    comm_fraction: float
    speedup: float


def _comm_times(sys: SystemSpec, wl: WorkloadSpec) -> tuple[float, float, float]:
    """(upload, download, index) seconds for one step."""
    bw = sys.bandwidth
    P = wl.gradient_size
    if wl.scheme == "none":
        return P * sys.value_bytes / bw, P * sys.value_bytes / bw, 0.0
    payload = P / wl.rate
    if wl.scheme == "local_topk":
        per_worker = payload * (sys.value_bytes + sys.index_bytes) / bw
        return per_worker, sys.workers * per_worker, 0.0
    # scalecom: one shared index broadcast, then values reduce both ways
    return (
        payload * sys.value_bytes / bw,
        payload * sys.value_bytes / bw,
        payload * sys.index_bytes / bw,
    )


def estimate_step(sys: SystemSpec, wl: WorkloadSpec) -> PerfEstimate:
    """Per-step time breakdown and speedup against the uncompressed scheme."""
    compute = wl.minibatch * wl.flops_per_sample / (sys.peak_flops * sys.efficiency)
    up, down, idx = _comm_times(sys, wl)
    comm = up + down + idx
    total = max(compute, comm) if wl.pipelined else compute + comm

    up0, down0, idx0 = _comm_times(sys, replace(wl, scheme="none"))
    comm0 = up0 + down0 + idx0
    total0 = max(compute, comm0) if wl.pipelined else compute + comm0

    return PerfEstimate(
        scheme=wl.scheme,
        workers=sys.workers,
        minibatch=wl.minibatch,
        bandwidth=sys.bandwidth,
        compute_s=compute,
        upload_s=up,
        download_s=down,
        index_s=idx,
        total_s=total,
        comm_fraction=comm / total,
        speedup=total0 / total,
    )


def sweep(sys: SystemSpec, wl: WorkloadSpec, vary: str, values) -> list[PerfEstimate]:
    """One estimate per value of the varied axis: n, b, bandwidth, or scheme."""
    if vary not in ("n", "b", "bandwidth", "scheme"):
        raise ValueError(f"cannot vary {vary!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        if vary == "n":
            rows.append(estimate_step(replace(sys, workers=int(value)), wl))
        elif vary == "b":
            rows.append(estimate_step(sys, replace(wl, minibatch=int(value))))
        elif vary == "bandwidth":
            rows.append(estimate_step(replace(sys, bandwidth=float(value)), wl))
        else:
            rows.append(estimate_step(sys, replace(wl, scheme=str(value))))
    return rows


def index_overhead_fraction(wl: WorkloadSpec, sys: SystemSpec) -> float:
    """Index traffic as a fraction of the uncompressed round-trip traffic.

    Indices flow once per step (the leader broadcast) against an
    uncompressed up+down baseline of 2 P value-bytes, so the fraction is
    index_bytes / (2 * rate * value_bytes).
    """
    return sys.index_bytes / (2.0 * wl.rate * sys.value_bytes)


def fit_efficiency(
    sys: SystemSpec,
    wl: WorkloadSpec,
    batch_sizes,
    target_fractions,
    grid: int = 4000,
) -> float:
    """Fit the single efficiency scalar so modeled comm fractions best match
    the targets (least max absolute deviation) at the given batch sizes."""
    batch_sizes = list(batch_sizes)
    target_fractions = list(target_fractions)
    if len(batch_sizes) != len(target_fractions) or not batch_sizes:
        raise ValueError("need matching non-empty batch sizes and targets")

    def deviation(eff: float) -> float:
        worst = 0.0
        for b, target in zip(batch_sizes, target_fractions):
            est = estimate_step(replace(sys, efficiency=eff), replace(wl, minibatch=int(b)))
            worst = max(worst, abs(est.comm_fraction - target))
        return worst

    best_eff, best_dev = 1.0, math.inf
    for i in range(1, grid + 1):
        eff = i / grid
        dev = deviation(eff)
        if dev < best_dev:
            best_eff, best_dev = eff, dev
    return best_eff


def write_sweep_csv(rows: list[PerfEstimate], path) -> None:
    """Documented column order: scheme, n, b, bandwidth, compute_s,
    upload_s, download_s, index_s, total_s, comm_fraction, speedup."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["scheme", "n", "b", "bandwidth", "compute_s", "upload_s",
             "download_s", "index_s", "total_s", "comm_fraction", "speedup"]
        )
        for r in rows:
            writer.writerow(
                [r.scheme, r.workers, r.minibatch, repr(float(r.bandwidth)),
                 repr(r.compute_s), repr(r.upload_s), repr(r.download_s),
                 repr(r.index_s), repr(r.total_s), repr(r.comm_fraction), repr(r.speedup)]
            )
