"""Rendering of scenario and benchmark results.

Scenario reports render as text or JSON. Benchmark reports write a CSV
table plus matplotlib figures next to it, and render a text table for
the terminal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import BenchReport, BenchResult
from .scenario import ScenarioReport


# --- scenario reports ---------------------------------------------------------

def render_scenario_text(report: ScenarioReport, log: bool = False) -> str:
    lines = [
        f"scenario: {report.name}",
        f"seed:     {report.seed}",
        f"mode:     {report.mode}",
    ]
    for a in report.asserts:
        mark = "PASS" if a.passed else "FAIL"
        lines.append(f"  [{a.requirement:>3}] {mark} {a.name}: {a.detail}")
    if report.error is not None:
        lines.append(f"  SCRIPT ERROR: {report.error}")
    total = len(report.asserts)
    good = sum(a.passed for a in report.asserts)
    verdict = "PASSED" if report.passed else "FAILED"
    lines.append(f"result: {verdict} ({good}/{total} checks)")
    if log:
        lines.append("event log:")
        lines.extend(f"  {entry}" for entry in report.event_log)
    return "\n".join(lines) + "\n"


def render_scenario_json(report: ScenarioReport, log: bool = False) -> str:
    payload = {
        "name": report.name,
        "seed": report.seed,
        "mode": report.mode,
        "passed": report.passed,
        "error": report.error,
        "asserts": [asdict(a) for a in report.asserts],
    }
    if log:
        payload["event_log"] = report.event_log
    return json.dumps(payload, indent=2) + "\n"


# --- benchmark reports ----------------------------------------------------------

CSV_FIELDS = ["group", "name", "n", "mean_us", "ci99_us", "baseline",
              "overhead_pct"]


def _result_row(r: BenchResult) -> dict:
    return {
        "group": r.group,
        "name": r.name,
        "n": r.n,
        "mean_us": f"{r.mean_us:.3f}",
        "ci99_us": f"{r.ci99_us:.3f}",
        "baseline": r.baseline or "",
        "overhead_pct": "" if r.overhead_pct is None else f"{r.overhead_pct:.1f}",
    }


def render_bench_csv(report: BenchReport) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for r in report.results:
        writer.writerow(_result_row(r))
    return out.getvalue()


def render_bench_json(report: BenchReport) -> str:
    payload = {
        "seed": report.seed,
        "iterations": report.iterations,
        "notes": report.notes,
        "results": [asdict(r) for r in report.results],
        "structural": report.structural,
    }
    return json.dumps(payload, indent=2) + "\n"


def render_bench_text(report: BenchReport) -> str:
    lines = [
        f"benchmark  iterations={report.iterations}  seed={report.seed}",
        f"{'group':<10} {'operation':<22} {'mean':>12} {'99% CI':>14} "
        f"{'overhead':>9}",
    ]
    for r in report.results:
        over = "" if r.overhead_pct is None else f"{r.overhead_pct:+8.1f}%"
        lines.append(f"{r.group:<10} {r.name:<22} {r.mean_us:>9.3f} us "
                     f"{'+/- ' + format(r.ci99_us, '.3f'):>14} {over:>9}")
    lines.append("hardware primitive calls per operation:")
    for key, value in sorted(report.structural.items()):
        lines.append(f"  {key} = {value}")
    lines.append(report.notes)
    return "\n".join(lines) + "\n"


def _grouped_figure(report: BenchReport, group: str, title: str,
                    path: Path) -> None:
    rows = [r for r in report.results if r.group == group]
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    names = [r.name for r in rows]
    means = [r.mean_us for r in rows]
    errs = [r.ci99_us for r in rows]
    colors = ["#4878a8" if r.baseline is None else "#b85450" for r in rows]
    ax.bar(range(len(rows)), means, yerr=errs, capsize=4, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean time (microseconds)")
    ax.set_title(f"{title} (n={report.iterations}, 99% CI)")
    if means and max(means) / max(min(m for m in means if m > 0), 1e-9) > 50:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bench_outputs(report: BenchReport, outdir: str | Path) -> list[Path]:
    """Write bench.csv, bench.json and the figures; return the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = outdir / "bench.csv"
    csv_path.write_text(render_bench_csv(report), encoding="utf-8")
    written.append(csv_path)

    json_path = outdir / "bench.json"
    json_path.write_text(render_bench_json(report), encoding="utf-8")
    written.append(json_path)

    for group, title, fname in (
        ("counter", "Monotonic counter operations", "fig_counter_ops.png"),
        ("sealing", "Sealing operations", "fig_sealing_ops.png"),
        ("lifecycle", "Library lifecycle and migration", "fig_lifecycle.png"),
    ):
        fig_path = outdir / fname
        _grouped_figure(report, group, title, fig_path)
        written.append(fig_path)
    return written
