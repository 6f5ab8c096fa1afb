"""Command line front end.

  sgxmigsim list-scenarios
  sgxmigsim run <scenario> [--seed N] [--mode full|baseline]
                           [--report text|json] [--log] [--out FILE]
  sgxmigsim bench [--iterations N] [--seed N] [--out DIR]

`run` exits 0 when every check in the scenario passed and 1 otherwise,
naming the failing checks on stderr. `bench` writes bench.csv,
bench.json and the figures into the output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ScriptError
from .bench import run_bench
from .report import (
    render_bench_text,
    render_scenario_json,
    render_scenario_text,
    write_bench_outputs,
)
from .scenario import bundled_scenarios, find_scenario, run_scenario


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgxmigsim",
        description="Simulated enclave migration: scenario runner and "
                    "benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list-scenarios", help="list bundled scenario scripts")

    run_p = sub.add_parser("run", help="run a scenario script")
    run_p.add_argument("scenario",
                       help="bundled scenario name or path to a YAML file")
    run_p.add_argument("--seed", type=int, default=0,
                       help="simulation seed (default 0)")
    run_p.add_argument("--mode", choices=("full", "baseline"),
                       help="override the library mode of every enclave")
    run_p.add_argument("--report", choices=("text", "json"), default="text",
                       help="output format (default text)")
    run_p.add_argument("--log", action="store_true",
                       help="include the simulation event log")
    run_p.add_argument("--out", type=Path,
                       help="also write the report to this file")

    bench_p = sub.add_parser("bench", help="run the micro-benchmarks")
    bench_p.add_argument("--iterations", type=int, default=200,
                         help="samples per operation (default 200)")
    bench_p.add_argument("--seed", type=int, default=0,
                         help="simulation seed (default 0)")
    bench_p.add_argument("--out", type=Path, default=Path("bench-out"),
                         help="output directory (default ./bench-out)")
    return parser


def _cmd_list() -> int:
    for name, path in bundled_scenarios().items():
        print(name)
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = find_scenario(args.scenario)
    except ScriptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = run_scenario(scenario, seed=args.seed, mode=args.mode)
    if args.report == "json":
        rendered = render_scenario_json(report, log=args.log)
    else:
        rendered = render_scenario_text(report, log=args.log)
    print(rendered, end="")
    if args.out is not None:
        args.out.write_text(rendered, encoding="utf-8")
    if not report.passed:
        print("failed checks: " + ", ".join(report.failing()), file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    if args.iterations < 2:
        print("error: --iterations must be at least 2", file=sys.stderr)
        return 2
    report = run_bench(iterations=args.iterations, seed=args.seed)
    written = write_bench_outputs(report, args.out)
    print(render_bench_text(report), end="")
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "list-scenarios":
        return _cmd_list()
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "bench":
        return _cmd_bench(args)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
