"""CSV/JSON outputs and figures for a benchmark sweep."""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .driver import ScenarioResult  # noqa: E402
from .stats import SummaryRow, TrendVerdict, compare_trend  # noqa: E402

SUMMARY_FIELDS = ("label", "min", "max", "average", "median", "sd")
MIB = 1024 * 1024


def write_samples(path: Path, results: Sequence[ScenarioResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", "node", "cpu_percent", "mem_bytes", "run"])
        for r in results:
            for s in r.samples:
                w.writerow([s.ts, s.node, f"{s.cpu_percent:.4f}", s.mem_bytes, r.spec.label])


def write_summary(path: Path, rows: Sequence[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row.as_dict())


def trend_verdicts(results: Sequence[ScenarioResult], node: str = "fog1") -> dict[str, TrendVerdict]:
    return {metric: compare_trend([r.row(node, metric) for r in results], "average")
            for metric in ("cpu", "memory")}


def relative_change(before: float, after: float) -> float:
    return (after - before) / before if before else 0.0


def build_verdict(results: Sequence[ScenarioResult], node: str = "fog1") -> dict:
    verdicts = trend_verdicts(results, node) if len(results) >= 2 else {}
    doc: dict = {
        "node": node,
        "runs": [r.spec.label for r in results],
        "trend": {m: v.as_dict() for m, v in verdicts.items()},
    }
    if len(results) >= 2:
        first, last = results[0], results[-1]
        doc["relative_change_first_to_last"] = {
            m: relative_change(first.row(node, m).average, last.row(node, m).average)
            for m in ("cpu", "memory")
        }
    doc["load"] = {r.spec.label: {"published": r.load.total, "errors": r.load.errors} for r in results}
    return doc


def _plot_metric(ax, results: Sequence[ScenarioResult], node: str, metric: str, scale: float) -> None:
    labels = [r.spec.label for r in results]
    rows = [r.row(node, metric) for r in results]
    x = range(len(rows))
    avg = [row.average / scale for row in rows]
    lo = [row.min / scale for row in rows]
    hi = [row.max / scale for row in rows]
    ax.fill_between(x, lo, hi, alpha=0.2, color="C0", label="min..max")
    ax.errorbar(x, avg, yerr=[row.sd / scale for row in rows], marker="o", color="C0",
                capsize=3, label="average ± sd")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=15, fontsize=8)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)


def write_figures(out: Path, results: Sequence[ScenarioResult], node: str = "fog1") -> list[Path]:
    written = []
    if results:
        fig, (ax_cpu, ax_mem) = plt.subplots(2, 1, figsize=(6.4, 6.4), sharex=True)
        _plot_metric(ax_cpu, results, node, "cpu", 1.0)
        ax_cpu.set_ylabel("CPU %")
        _plot_metric(ax_mem, results, node, "memory", MIB)
        ax_mem.set_ylabel("RSS (MiB)")
        ax_cpu.set_title(f"{node}: resource usage per run")
        fig.tight_layout()
        path = out / "summary.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for r in results:
            for n in sorted(r.rows):
                series = [s for s in r.samples if s.node == n]
                t0 = series[0].ts if series else 0
                ax.plot([(s.ts - t0) / 1000 for s in series], [s.cpu_percent for s in series],
                        label=f"{r.spec.label} {n}", lw=1)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("CPU %")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        path = out / "cpu_timeseries.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_report(out_dir: str | os.PathLike, results: Sequence[ScenarioResult],
                 node: str = "fog1", figures: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_samples(out / "samples.csv", results)
    rows = [row for r in results for n in sorted(r.rows) for row in r.rows[n].values()]
    write_summary(out / "summary.csv", rows)
    verdict = build_verdict(results, node)
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2))
    if figures:
        write_figures(out, results, node)
    return verdict
