"""Experiment runner.

Subcommands:
  train    run the simulator from a JSON config (optionally paired with an
           uncompressed baseline on identical mini-batch streams); writes a
           JSONL trace, a summary JSON, the effective config echo, and a
           loss-curve figure
  theory   evaluate the closed-form results (filter-factor range, recursion
           constants, contraction coefficients, bound curve, rate guidance)
  perf     run the analytical performance-model sweep; writes CSV + figures
  analyze  turn a trace into metric CSVs and figures

Exit codes: 0 success, 2 config/parse error, 3 divergence (partial trace
is retained). Every run is reproducible byte-for-byte from (config, seed).
The default output root comes from the CLTOPK_OUT environment variable
(falling back to ./runs).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import metrics, perfmodel, plotting, theory
from .compress import CompressorKind
from .problems import Logistic, Problem, Quadratic, TinyMLP, load_csv_dataset
from .simulator import (
    ConfigError,
    DivergenceError,
    LayerPartition,
    LrSchedule,
    SimConfig,
    run,
    run_paired,
)

ENV_OUT_ROOT = "CLTOPK_OUT"


class TraceParseError(ValueError):
    """A trace line failed to parse; message carries the line number."""


def default_out_root() -> Path:
    return Path(os.environ.get(ENV_OUT_ROOT, "runs"))


def build_problem(spec: dict) -> Problem:
    kind = spec.get("kind")
    seed = int(spec.get("seed", 0))
    if kind == "quadratic":
        return Quadratic.with_condition(
            p=int(spec.get("dimension", 1000)),
            condition=float(spec.get("condition", 100.0)),
            noise_scale=float(spec.get("noise", 0.0)),
            seed=seed,
            scale=float(spec.get("scale", 1.0)),
        )
    if kind == "logistic":
        if "csv_path" in spec:
            X, y = load_csv_dataset(spec["csv_path"], delimiter=spec.get("delimiter", ","))
            return Logistic(features=X, labels=y, l2=float(spec.get("l2", 1e-3)))
        return Logistic.synthetic(
            n_samples=int(spec.get("samples", 512)),
            p=int(spec.get("dimension", 64)),
            seed=seed,
            separation=float(spec.get("separation", 1.0)),
            l2=float(spec.get("l2", 1e-3)),
        )
    if kind == "mlp":
        if "csv_path" in spec:
            X, y = load_csv_dataset(spec["csv_path"], delimiter=spec.get("delimiter", ","))
            return TinyMLP(features=X, labels=y.astype(int), hidden=int(spec.get("hidden", 8)))
        return TinyMLP.synthetic(
            n_samples=int(spec.get("samples", 128)),
            d_in=int(spec.get("input_dim", 6)),
            hidden=int(spec.get("hidden", 8)),
            n_classes=int(spec.get("classes", 2)),
            seed=seed,
        )
    raise ConfigError(f"unknown problem kind {kind!r}")


def build_sim_config(raw: dict) -> SimConfig:
    problem_spec = raw.get("problem")
    if not isinstance(problem_spec, dict):
        raise ConfigError("config needs a 'problem' object")
    problem = build_problem(problem_spec)

    schedule_spec = raw.get("lr_schedule", {"kind": "constant"})
    schedule = LrSchedule(
        kind=schedule_spec.get("kind", "constant"),
        warmup=int(schedule_spec.get("warmup", 0)),
    )
    partitions = None
    if raw.get("partitions"):
        partitions = [
            LayerPartition(length=int(part["length"]), rate=float(part["rate"]))
            for part in raw["partitions"]
        ]
    return SimConfig(
        problem=problem,
        workers=int(raw.get("workers", 8)),
        alpha=float(raw.get("alpha", 0.05)),
        beta=float(raw.get("beta", 0.1)),
        iterations=int(raw.get("iterations", 1000)),
        seed=int(raw.get("seed", 0)),
        k=int(raw["k"]) if "k" in raw else None,
        compression_rate=float(raw["compression_rate"]) if "compression_rate" in raw else None,
        warmup_steps=int(raw.get("warmup_steps", 0)),
        compressor=CompressorKind.parse(raw.get("compressor", "cyclic-topk")),
        batch_size=int(raw.get("batch_size", 8)),
        momentum=float(raw.get("momentum", 0.0)),
        metric_stride=int(raw.get("metric_stride", 1)),
        lr_schedule=schedule,
        partitions=partitions,
        parallel_gradients=bool(raw.get("parallel_gradients", False)),
        value_bytes=int(raw.get("value_bytes", 4)),
        index_bytes=int(raw.get("index_bytes", 4)),
        problem_spec=problem_spec,
    )


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def read_trace(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"{path}: malformed trace line {lineno}: {exc.msg}") from exc
    if not records:
        raise TraceParseError(f"{path}: trace is empty")
    return records


def _apply_overrides(raw: dict, args) -> dict:
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.beta is not None:
        raw["beta"] = args.beta
    if args.rate is not None:
        raw["compression_rate"] = args.rate
        raw.pop("k", None)
    if args.scheme is not None:
        raw["compressor"] = args.scheme
    if args.problem is not None:
        raw.setdefault("problem", {})["kind"] = args.problem
    if args.stride is not None:
        raw["metric_stride"] = args.stride
    if args.paired is not None:
        raw["paired"] = args.paired
    return raw


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args) -> int:
    raw = load_json(args.config) if args.config else {}
    raw = _apply_overrides(raw, args)
    if "problem" not in raw:
        raw["problem"] = {"kind": "quadratic", "dimension": 200, "condition": 50.0, "noise": 0.01}
    paired = bool(raw.get("paired", False))
    cfg = build_sim_config(raw)

    out_dir = Path(args.out) if args.out else default_out_root() / "train"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(_effective_config(raw, cfg), out_dir / "config.json")

    try:
        if paired:
            trace, baseline = run_paired(cfg)
            baseline.write_jsonl(out_dir / "baseline.jsonl")
        else:
            trace = run(cfg)
            baseline = None
    except DivergenceError as exc:
        partial = exc.records
        with open(out_dir / "trace.jsonl", "w") as fh:
            for rec in partial:
                fh.write(json.dumps(rec.to_dict()) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return 3

    trace.write_jsonl(out_dir / "trace.jsonl")
    summary = dict(trace.summary)
    if baseline is not None:
        summary["baseline"] = baseline.summary
        if baseline.summary["final_loss"] > 0:
            summary["loss_ratio_vs_baseline"] = (
                trace.summary["final_loss"] / baseline.summary["final_loss"]
            )
    _write_json(summary, out_dir / "summary.json")

    ts = [rec.t for rec in trace.records]
    series = {"compressed" if paired else cfg.compressor.label(): [rec.loss for rec in trace.records]}
    if baseline is not None:
        series["baseline"] = [rec.loss for rec in baseline.records]
    plotting.save_multi_series(ts, series, out_dir / "loss_curve.png", "loss", "training loss", logy=True)

    print(f"wrote {out_dir}/trace.jsonl ({len(trace.records)} records)")
    print(f"final loss {trace.summary['final_loss']:.6g}, "
          f"final grad norm^2 {trace.summary['final_grad_norm_sq']:.6g}")
    return 0


def _effective_config(raw: dict, cfg: SimConfig) -> dict:
    echo = dict(raw)
    echo.update(
        {
            "workers": cfg.workers,
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "k": cfg.total_k(),
            "warmup_steps": cfg.warmup_steps,
            "compressor": cfg.compressor.label(),
            "batch_size": cfg.batch_size,
            "momentum": cfg.momentum,
            "metric_stride": cfg.metric_stride,
            "value_bytes": cfg.value_bytes,
            "index_bytes": cfg.index_bytes,
        }
    )
    return echo


def cmd_theory(args) -> int:
    gamma = args.gamma
    print(f"gamma = {gamma}")
    if gamma is not None:
        if 0.0 <= gamma < 1.0:
            lo, hi = theory.admissible_beta_range(gamma)
            print(f"admissible beta range: ({lo:.12g}, {hi:.12g})")
        else:
            print("admissible beta range: infeasible (gamma >= 1)")
        if args.beta is not None:
            ceiling = theory.epsilon_ceiling(args.beta, gamma)
            eps = args.eps if args.eps is not None else max(ceiling / 2.0, 0.0)
            lam = theory.lambda_factor(args.beta, gamma, eps)
            print(f"epsilon ceiling C_eps(beta={args.beta}) = {ceiling:.12g}")
            print(f"lambda(beta={args.beta}, eps={eps:.12g}) = {lam:.12g}"
                  + ("" if lam < 1 else "  [infeasible: >= 1]"))
    if args.d is not None and args.k is not None and args.gamma0 is not None:
        g = theory.contraction_from_overlap(args.d, args.k, args.gamma0)
        print(f"contraction from overlap (d={args.d}, k={args.k}, gamma0={args.gamma0}): {g:.12g}")
    if args.per_worker_gammas:
        gammas = [float(x) for x in args.per_worker_gammas.split(",")]
        combined = theory.combined_contraction(gammas, kappa=args.kappa)
        if combined is None:
            print("combined contraction: infeasible (correlation below threshold)")
        else:
            print(f"combined contraction over {len(gammas)} workers: {combined:.12g}")
    if args.rate_guidance is not None:
        rate = theory.recommend_compression_rate(args.rate_guidance)
        print(f"recommended compression rate for flops/gradient ratio "
              f"{args.rate_guidance:g}: {rate}X")
    if args.t_grid:
        t_grid = [int(x) for x in args.t_grid.split(",")]
        inputs = theory.BoundInputs(
            gap=args.gap, g_bound=args.g_bound, lipschitz=args.lipschitz,
            sigma=args.sigma, gamma=gamma if gamma is not None else 0.0,
            beta=args.beta if args.beta is not None else 0.5,
            eps=args.eps if args.eps is not None else 0.5,
            workers=args.workers, lr_scale=args.lr_scale,
        )
        try:
            values = theory.convergence_bound(inputs, t_grid)
        except ValueError as exc:
            print(f"bound curve: infeasible ({exc})")
            return 0
        print("T,bound")
        for t, v in zip(t_grid, values):
            print(f"{t},{v!r}")
        if args.out:
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "bound_curve.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["T", "bound"])
                for t, v in zip(t_grid, values):
                    writer.writerow([t, repr(float(v))])
            print(f"wrote {out_dir}/bound_curve.csv")
    return 0


def cmd_perf(args) -> int:
    raw = load_json(args.config) if args.config else {}
    sys_spec = perfmodel.SystemSpec(
        workers=int(raw.get("system", {}).get("workers", 8)),
        peak_flops=float(raw.get("system", {}).get("peak_flops", 100e12)),
        efficiency=float(raw.get("system", {}).get("efficiency", 0.5)),
        bandwidth=float(raw.get("system", {}).get("bandwidth", 32e9)),
        value_bytes=float(raw.get("system", {}).get("value_bytes", 2)),
        index_bytes=float(raw.get("system", {}).get("index_bytes", 4)),
    )
    wl_raw = raw.get("workload", {})
    workload = perfmodel.WorkloadSpec(
        flops_per_sample=float(wl_raw.get("flops_per_sample", 8e9)),
        gradient_size=int(wl_raw.get("gradient_size", 25_500_000)),
        minibatch=int(wl_raw.get("minibatch", 8)),
        rate=float(wl_raw.get("rate", 112.0)),
        scheme=wl_raw.get("scheme", "scalecom"),
        pipelined=bool(wl_raw.get("pipelined", False)),
    )
    sweep_raw = raw.get("sweep", {})
    vary = sweep_raw.get("vary", "n")
    values = sweep_raw.get("values", [8, 16, 32, 64, 128])
    schemes = sweep_raw.get("schemes", list(perfmodel.SCHEMES))

    rows = []
    for scheme in schemes:
        rows.extend(perfmodel.sweep(sys_spec, dc_replace(workload, scheme=scheme), vary, values))

    out_dir = Path(args.out) if args.out else default_out_root() / "perf"
    out_dir.mkdir(parents=True, exist_ok=True)
    perfmodel.write_sweep_csv(rows, out_dir / "sweep.csv")
    if vary == "n":
        plotting.save_speedup_curve(rows, out_dir / "speedup.png", "step-time speedup")
    plotting.save_time_bars(rows, out_dir / "time_bars.png", "per-step time breakdown")
    print(f"wrote {out_dir}/sweep.csv ({len(rows)} rows)")
    return 0


def _series_csv(records, field, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", field])
        for rec in records:
            value = rec.get(field)
            writer.writerow([rec["t"], "" if value is None else repr(float(value))])


def cmd_analyze(args) -> int:
    records = read_trace(args.trace)
    out_dir = Path(args.out) if args.out else default_out_root() / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    for field in ("loss", "grad_norm_sq", "mem_cosine_mean", "d_over_k",
                  "gamma", "gamma0", "spearman", "virtual_residual"):
        _series_csv(records, field, out_dir / f"{field}.csv")

    with_hist = [rec for rec in records if rec.get("hist_edges")]
    if with_hist:
        last = with_hist[-1]
        hist = metrics.MagnitudeHistogram(
            edges=np.asarray(last["hist_edges"], dtype=float),
            counts=np.asarray(last["hist_counts"], dtype=np.int64),
            zeros=int(last["hist_zeros"]),
        )
        metrics.write_histogram_csv(hist, out_dir / "histogram.csv")
        plotting.save_histogram(
            hist.edges, hist.counts, hist.zeros, out_dir / "histogram.png",
            f"residual-gradient magnitudes at t={last['t']}",
        )

    ts = [rec["t"] for rec in records]
    plotting.save_series(ts, [r.get("loss") for r in records], out_dir / "loss.png",
                         "loss", "training loss", logy=True)
    plotting.save_series(ts, [r.get("mem_cosine_mean") for r in records],
                         out_dir / "cosine_distance.png",
                         "mean pairwise cosine distance", "memory similarity")
    plotting.save_series(ts, [r.get("d_over_k") for r in records], out_dir / "overlap.png",
                         "d/k", "support distance to true top-k")
    plotting.save_series(ts, [r.get("spearman") for r in records], out_dir / "spearman.png",
                         "rank correlation", "worker-0 vs averaged magnitudes")
    print(f"wrote metric CSVs and figures to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cltopk",
        description="Shared-support gradient-compression simulator and analysis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training simulator")
    p_train.add_argument("--config", help="JSON config path")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--workers", type=int)
    p_train.add_argument("--beta", type=float)
    p_train.add_argument("--rate", type=float, help="compression rate (k = ceil(p / rate))")
    p_train.add_argument("--scheme", help="compressor kind, e.g. cyclic-topk or chunked-topk:16")
    p_train.add_argument("--problem", help="problem kind: quadratic | logistic | mlp")
    p_train.add_argument("--stride", type=int, help="metric stride")
    p_train.add_argument("--paired", type=lambda s: s.lower() in ("1", "true", "yes"),
                         help="also run the uncompressed baseline on the same batches")
    p_train.set_defaults(func=cmd_train)

    p_theory = sub.add_parser("theory", help="evaluate closed-form results")
    p_theory.add_argument("--gamma", type=float)
    p_theory.add_argument("--beta", type=float)
    p_theory.add_argument("--eps", type=float)
    p_theory.add_argument("--d", type=int)
    p_theory.add_argument("--k", type=int)
    p_theory.add_argument("--gamma0", type=float)
    p_theory.add_argument("--kappa", type=float, default=0.5)
    p_theory.add_argument("--per-worker-gammas", help="comma-separated per-worker coefficients")
    p_theory.add_argument("--rate-guidance", type=float,
                          help="FLOPs-per-gradient ratio to get a rate recommendation")
    p_theory.add_argument("--t-grid", help="comma-separated horizons for the bound curve")
    p_theory.add_argument("--gap", type=float, default=1.0)
    p_theory.add_argument("--g-bound", type=float, default=1.0)
    p_theory.add_argument("--lipschitz", type=float, default=1.0)
    p_theory.add_argument("--sigma", type=float, default=1.0)
    p_theory.add_argument("--workers", type=int, default=8)
    p_theory.add_argument("--lr-scale", type=float, default=1.0)
    p_theory.add_argument("--out", help="directory for the bound-curve CSV")
    p_theory.set_defaults(func=cmd_theory)

    p_perf = sub.add_parser("perf", help="analytical performance-model sweep")
    p_perf.add_argument("--config", help="JSON with system/workload/sweep sections")
    p_perf.add_argument("--out", help="output directory")
    p_perf.set_defaults(func=cmd_perf)

    p_an = sub.add_parser("analyze", help="extract metric CSVs and figures from a trace")
    p_an.add_argument("--trace", required=True, help="trace JSONL path")
    p_an.add_argument("--out", help="output directory")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
