"""Delimited tables and matplotlib figures for the report commands."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update(
    {
        "figure.figsize": [6.0, 4.0],
        "figure.dpi": 120,
        "savefig.dpi": 150,
        "font.size": 10,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
    }
)


def write_table(path, rows: Sequence[dict], delimiter: str = "\t") -> Path:
    """Write dict rows with a header line; columns follow first-seen key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return path


def read_table(path, delimiter: str = "\t") -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


def _cell(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_latency_vs_pass_rate(rows: Sequence[dict], path) -> Path:
    """Mean latency against TBR pass rate, one line per batch size."""
    fig, ax = plt.subplots()
    for b in sorted({r["batchSize"] for r in rows}):
        pts = sorted((r["passRate"], r["meanLatencyMs"]) for r in rows if r["batchSize"] == b)
        ax.plot([p[0] * 100 for p in pts], [p[1] for p in pts], marker="o", label=f"batch {b}")
    ax.set_xlabel("term match pass rate (%)")
    ax.set_ylabel("latency per request (ms)")
    ax.legend()
    return _save(fig, path)


def plot_batch_throughput(rows: Sequence[dict], path) -> Path:
    """QPS and latency against batch size, one line per pass rate."""
    fig, (ax_q, ax_l) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for rate in sorted({r["passRate"] for r in rows}):
        pts = sorted((r["batchSize"], r["qps"], r["meanLatencyMs"]) for r in rows if r["passRate"] == rate)
        sizes = [p[0] for p in pts]
        ax_q.plot(sizes, [p[1] for p in pts], marker="o", label=f"pass {rate:.0%}")
        ax_l.plot(sizes, [p[2] for p in pts], marker="o", label=f"pass {rate:.0%}")
    for ax in (ax_q, ax_l):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("batch size")
    ax_q.set_ylabel("queries per second")
    ax_l.set_ylabel("latency per request (ms)")
    ax_q.legend()
    return _save(fig, path)


def plot_link_tradeoff(rows: Sequence[dict], path, labels: Sequence[str] | None = None) -> Path:
    """Hire recall against false-positive rate over quality thresholds.

    ``rows`` may hold a ``method`` key to draw one curve per scoring method.
    """
    fig, ax = plt.subplots()
    methods = sorted({r.get("method", "") for r in rows})
    for method in methods:
        pts = sorted((r["falsePositiveRate"], r["recall"]) for r in rows if r.get("method", "") == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=method or None)
    ax.set_xlabel("false positive rate of linked pairs")
    ax.set_ylabel("hire recall")
    ax.set_ylim(0, 1.05)
    if any(methods):
        ax.legend()
    return _save(fig, path)


def plot_learning_curve(history: Sequence[dict], path, metric: str | None = None) -> Path:
    """Loss and (when recorded) validation recall against step, shaded by stage."""
    if metric is None:
        metric = next((k for h in history for k in h if k.startswith("inBatchRecall")), None)
    fig, ax = plt.subplots()
    steps = [h["step"] for h in history]
    ax.plot(steps, [h["loss"] for h in history], color="C0", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    stage2 = [h["step"] for h in history if h.get("stage") == 2]
    if stage2:
        ax.axvspan(min(stage2), max(stage2), color="0.9", zorder=0, label="stage 2")
    if metric:
        pts = [(h["step"], h[metric]) for h in history if metric in h]
        twin = ax.twinx()
        twin.plot([p[0] for p in pts], [p[1] for p in pts], color="C1", marker="o", ms=3, label=metric)
        twin.set_ylabel(metric)
        twin.grid(False)
        twin.legend(loc="lower right")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_topk_speedup(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = ["sort" if r["method"] == "sort" else f"G={r['granularity']}" for r in rows]
    ax.bar(names, [r["ms"] for r in rows], color=["0.6"] + ["C0"] * (len(rows) - 1))
    ax.set_ylabel("selection time (ms)")
    return _save(fig, path)
