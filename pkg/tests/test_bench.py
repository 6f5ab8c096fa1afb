"""Benchmark harness: statistics, structural counts, file outputs."""

from __future__ import annotations

import csv
import json
import math

import pytest

from sgxmigsim.harness.bench import BenchReport, BenchResult, run_bench, _stats
from sgxmigsim.harness.cli import main
from sgxmigsim.harness.report import (
    CSV_FIELDS,
    render_bench_csv,
    render_bench_text,
    write_bench_outputs,
)

TIMED_ROWS = [
    "native-create", "native-increment", "native-read", "native-destroy",
    "migratable-create", "migratable-increment", "migratable-read",
    "migratable-destroy",
    "native-seal", "native-unseal", "migratable-seal", "migratable-unseal",
    "init-new", "init-reload", "migration-e2e",
]
BASELINED = {
    "migratable-create": "native-create",
    "migratable-increment": "native-increment",
    "migratable-read": "native-read",
    "migratable-destroy": "native-destroy",
    "migratable-seal": "native-seal",
    "migratable-unseal": "native-unseal",
}


@pytest.fixture(scope="module")
def report():
    return run_bench(iterations=25, seed=1)


def test_every_operation_pair_is_reported(report):
    assert [r.name for r in report.results] == TIMED_ROWS
    for r in report.results:
        assert r.n == 25
        assert math.isfinite(r.mean_us) and r.mean_us >= 0
        assert math.isfinite(r.ci99_us) and r.ci99_us >= 0
        assert r.baseline == BASELINED.get(r.name)
        if r.name in BASELINED:
            assert r.overhead_pct is not None
        else:
            assert r.overhead_pct is None


def test_confidence_interval_math():
    # hand-checked half width for [1,2,3,4] s: sample std = sqrt(5/3) s,
    # t(0.995, df=3) = 5.840909, so half = 5.840909 * sqrt(5/3)/2 * 1e6 us
    mean, half = _stats([1.0, 2.0, 3.0, 4.0])
    assert mean == pytest.approx(2.5e6)
    assert half == pytest.approx(5.840909 * math.sqrt(5 / 3) / 2 * 1e6, rel=1e-5)
    assert _stats([0.5]) == (0.5e6, 0.0)


def test_structural_counts(report):
    assert report.structural == {
        "create.mc_create": 1,
        "increment.mc_read": 1,       # overflow is checked before bumping
        "increment.mc_increment": 1,
        "read.mc_read": 1,
        "destroy.mc_destroy": 1,
        "migration_source_8_counters.mc_read": 8,
        "migration_source_8_counters.mc_destroy": 8,
        "migration_destination_8_counters.mc_create": 8,
    }


def test_structural_counts_ignore_the_seed():
    a = run_bench(iterations=2, seed=0).structural
    b = run_bench(iterations=2, seed=424242).structural
    assert a == b


def test_notes_disclaim_hardware_numbers(report):
    # the simulation's timings say nothing about silicon; the report has
    # to carry that caveat everywhere a number appears
    assert "do not reproduce" in report.notes
    assert "hardware" in report.notes
    assert report.notes in render_bench_text(report)


def test_text_table_lists_everything(report):
    text = render_bench_text(report)
    for name in TIMED_ROWS:
        assert name in text
    assert "hardware primitive calls per operation:" in text
    assert "99% CI" in text


def test_csv_layout(report):
    rows = list(csv.DictReader(render_bench_csv(report).splitlines()))
    assert list(rows[0]) == CSV_FIELDS
    assert [r["name"] for r in rows] == TIMED_ROWS
    for r in rows:
        float(r["mean_us"]), float(r["ci99_us"])
        assert int(r["n"]) == 25
    overhead = {r["name"]: r["overhead_pct"] for r in rows}
    assert all(overhead[name] != "" for name in BASELINED)
    assert overhead["native-create"] == ""


def test_output_files(report, tmp_path):
    written = write_bench_outputs(report, tmp_path)
    assert [p.name for p in written] == [
        "bench.csv", "bench.json", "fig_counter_ops.png",
        "fig_sealing_ops.png", "fig_lifecycle.png"]
    payload = json.loads((tmp_path / "bench.json").read_text())
    assert payload["iterations"] == 25
    assert payload["notes"] == report.notes
    assert len(payload["results"]) == len(TIMED_ROWS)
    assert payload["structural"] == report.structural
    for png in written[2:]:
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert png.stat().st_size > 1000


def test_report_lookup_helper():
    rep = BenchReport(seed=0, iterations=1,
                      results=[BenchResult("x", "counter", 1, 1.0, 0.0)])
    assert rep.result("x").name == "x"
    with pytest.raises(KeyError):
        rep.result("y")


def test_cli_bench(tmp_path, capsys):
    assert main(["bench", "--iterations", "2", "--seed", "3",
                 "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "iterations=2" in out and "wrote" in out
    assert (tmp_path / "b" / "bench.csv").exists()
    assert (tmp_path / "b" / "fig_lifecycle.png").exists()


def test_cli_bench_rejects_tiny_sample(capsys):
    assert main(["bench", "--iterations", "1"]) == 2
    assert "at least 2" in capsys.readouterr().err
