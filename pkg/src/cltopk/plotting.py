"""Figure rendering for the report paths.

Every report command writes PNG figures next to its delimited output.
Rendering is headless (Agg) and file-based only; nothing interactive.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGSIZE = (6.0, 3.6)
DPI = 120


def _finish(fig, ax, path, xlabel, ylabel, title):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_series(ts, values, path, ylabel, title, logy=False, label=None):
    """Line plot of one per-iteration series; None/NaN points are dropped."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray([np.nan if v is None else v for v in values], dtype=float)
    keep = ~np.isnan(values)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(ts[keep], values[keep], lw=1.2, label=label)
    if logy and np.any(values[keep] > 0):
        ax.set_yscale("log")
    if label:
        ax.legend()
    _finish(fig, ax, path, "iteration", ylabel, title)


def save_multi_series(ts, named_series: dict, path, ylabel, title, logy=False):
    """Several aligned series on one axis (e.g. paired loss curves)."""
    ts = np.asarray(ts, dtype=float)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for name, values in named_series.items():
        values = np.asarray([np.nan if v is None else v for v in values], dtype=float)
        keep = ~np.isnan(values)
        ax.plot(ts[keep], values[keep], lw=1.2, label=name)
    if logy:
        ax.set_yscale("log")
    ax.legend()
    _finish(fig, ax, path, "iteration", ylabel, title)


def save_histogram(edges, counts, zeros, path, title):
    """Log-x bar chart of a magnitude histogram; the zero bucket is noted
    in the title rather than drawn (it has no log-scale position)."""
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    if edges.size >= 2:
        widths = np.diff(edges)
        ax.bar(edges[:-1], counts, width=widths, align="edge", alpha=0.75, edgecolor="none")
        ax.set_xscale("log")
    _finish(fig, ax, path, "magnitude", "count", f"{title} (zeros: {zeros})")


def save_speedup_curve(rows, path, title):
    """Speedup vs worker count, one line per scheme."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    schemes = sorted({r.scheme for r in rows})
    for scheme in schemes:
        pts = sorted((r.workers, r.speedup) for r in rows if r.scheme == scheme)
        ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", lw=1.2, label=scheme)
    ax.legend()
    _finish(fig, ax, path, "workers", "speedup vs uncompressed", title)


def save_time_bars(rows, path, title):
    """Stacked compute/upload/download/index bars, one per sweep row."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    xs = np.arange(len(rows))
    labels = [f"{r.scheme}\nn={r.workers},b={r.minibatch}" for r in rows]
    bottom = np.zeros(len(rows))
    for part, color in (
        ("compute_s", "#4c72b0"), ("upload_s", "#dd8452"),
        ("download_s", "#55a868"), ("index_s", "#c44e52"),
    ):
        vals = np.array([getattr(r, part) for r in rows])
        ax.bar(xs, vals, bottom=bottom, label=part.removesuffix("_s"), color=color)
        bottom += vals
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=7)
    ax.legend(fontsize=8)
    _finish(fig, ax, path, "", "seconds / step", title)
