"""Shared fixtures plus the acceptance summary printer.

Tests in test_acceptance.py carry a `criterion` marker naming the check
they stand for. After the run, one PASS/FAIL line per criterion is
written to the terminal so the verdict is readable without digging
through pytest internals.
"""

from __future__ import annotations

import pytest

from sgxmigsim import sgx
from sgxmigsim.enclave import MigrationEnclave, OperatorCA
from sgxmigsim.netsim import Simulation

_criterion_by_node: dict[str, str] = {}
_outcome_by_criterion: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(name): names the acceptance criterion a test enforces")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _criterion_by_node[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    label = _criterion_by_node.get(report.nodeid)
    if label is None:
        return
    if report.when == "call":
        _outcome_by_criterion[label] = "PASS" if report.passed else "FAIL"
    elif report.failed:  # setup or teardown blew up
        _outcome_by_criterion[label] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcome_by_criterion:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    width = max(len(label) for label in _outcome_by_criterion)
    for label, outcome in _outcome_by_criterion.items():
        terminalreporter.write_line(f"{label:<{width}}  {outcome}")


# --- shared world builders ----------------------------------------------------

@pytest.fixture
def sim():
    return Simulation(seed=2024)


@pytest.fixture
def platform(sim):
    _, plat = sim.register_machine()
    return plat


def build_world(seed: int = 0, machines: int = 2, operator: str = "operator-a"):
    """Simulation with N machines, each carrying a provisioned ME."""
    world = Simulation(seed)
    ca = OperatorCA.generate(operator, world.rng)
    mes = []
    for _ in range(machines):
        _, plat = world.register_machine()
        me = MigrationEnclave(world, plat)
        me.setup(ca.issue(world.rng))
        mes.append(me)
    return world, mes, ca


@pytest.fixture
def world():
    return build_world()


def identity(name: str = "app", signer: str = "vendor") -> sgx.EnclaveIdentity:
    return sgx.make_identity(name, signer)
