"""Evaluation harness: scenario scripts, attack demos, benchmarks, reports."""

from .app import LoadResult, VersionedApp
from .baseline import NaiveMigrationLibrary
from .scenario import (
    AssertResult,
    RogueMigrationEnclave,
    Scenario,
    ScenarioReport,
    ScenarioRunner,
    bundled_scenarios,
    find_scenario,
    load_scenario,
    parse_scenario,
    run_fork_scenario,
    run_rollback_scenario,
    run_scenario,
)

__all__ = [
    "AssertResult",
    "LoadResult",
    "NaiveMigrationLibrary",
    "RogueMigrationEnclave",
    "Scenario",
    "ScenarioReport",
    "ScenarioRunner",
    "VersionedApp",
    "bundled_scenarios",
    "find_scenario",
    "load_scenario",
    "parse_scenario",
    "run_fork_scenario",
    "run_rollback_scenario",
    "run_scenario",
]
