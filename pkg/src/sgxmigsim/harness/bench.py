"""Micro-benchmarks of library operations inside the simulation.

Each operation is timed per call; rows report the mean and a 99%
confidence interval from the t distribution, and migratable operations
report their overhead against the matching native operation. A second
table counts hardware counter primitives consumed per library call,
which is the part of the cost model that carries over to real
platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np
from scipy import stats

from .. import sgx
from ..enclave import ME_ENDPOINT, MigrationEnclave, OperatorCA, me_identity
from ..library import InitState, MigrationLibrary
from ..netsim import Address, Simulation

NOTES = ("notes: timings measure this in-process simulation on commodity "
         "Python; they characterize relative costs of the model only and do "
         "not reproduce measurements taken on hardware platforms.")

PAYLOAD_LEN = 1024


@dataclass
class BenchResult:
    name: str
    group: str               # counter | sealing | lifecycle
    n: int
    mean_us: float
    ci99_us: float
    baseline: str | None = None
    overhead_pct: float | None = None


@dataclass
class BenchReport:
    seed: int
    iterations: int
    results: list[BenchResult] = field(default_factory=list)
    structural: dict[str, int] = field(default_factory=dict)
    notes: str = NOTES

    def result(self, name: str) -> BenchResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)


def _stats(samples: list[float]) -> tuple[float, float]:
    """Mean and half-width of the 99% CI, both in microseconds."""
    n = len(samples)
    arr = np.asarray(samples) * 1e6
    mean = float(arr.mean())
    if n < 2:
        return mean, 0.0
    half = float(stats.t.ppf(0.995, n - 1) * arr.std(ddof=1) / math.sqrt(n))
    return mean, half


class _Env:
    """Two machines with MEs, one VM, fresh per benchmark run."""

    def __init__(self, seed: int):
        self.sim = Simulation(seed)
        self.machine_a, self.platform_a = self.sim.register_machine()
        self.machine_b, self.platform_b = self.sim.register_machine()
        ca = OperatorCA.generate("bench-operator", self.sim.rng)
        for platform in (self.platform_a, self.platform_b):
            me = MigrationEnclave(self.sim, platform)
            me.setup(ca.issue(self.sim.rng))
        self.vm_id = "vm-bench"
        self.sim.add_vm(self.vm_id, self.machine_a)
        self.identity = sgx.make_identity("bench-app")
        self._next_ep = 1

    def endpoint(self) -> int:
        ep = self._next_ep
        self._next_ep += 1
        return ep

    def new_library(self, machine: int, platform: sgx.PlatformState,
                    init: InitState, buffer: bytes | None = None,
                    key: str = "bench/internals") -> MigrationLibrary:
        lib = MigrationLibrary(self.sim, platform, self.identity, me_identity(),
                               self.vm_id, Address(machine, self.endpoint()),
                               storage_key=key)
        lib.migration_init(buffer, init, Address(machine, ME_ENDPOINT))
        return lib


def _timed(fn) -> float:
    t0 = perf_counter()
    fn()
    return perf_counter() - t0


def _bench_native_counters(env: _Env, n: int, out: list[BenchResult]) -> None:
    platform, ident = env.platform_a, env.identity
    samples = []
    for _ in range(n):
        holder: list = []
        samples.append(_timed(
            lambda: holder.append(sgx.mc_create(platform, ident))))
        sgx.mc_destroy(platform, ident, holder[0][0])
    out.append(BenchResult("native-create", "counter", n, *_stats(samples)))

    uuid, _ = sgx.mc_create(platform, ident)
    samples = [_timed(lambda: sgx.mc_increment(platform, ident, uuid))
               for _ in range(n)]
    out.append(BenchResult("native-increment", "counter", n, *_stats(samples)))
    samples = [_timed(lambda: sgx.mc_read(platform, ident, uuid))
               for _ in range(n)]
    out.append(BenchResult("native-read", "counter", n, *_stats(samples)))
    sgx.mc_destroy(platform, ident, uuid)

    samples = []
    for _ in range(n):
        uuid, _ = sgx.mc_create(platform, ident)
        samples.append(_timed(
            lambda: sgx.mc_destroy(platform, ident, uuid)))
    out.append(BenchResult("native-destroy", "counter", n, *_stats(samples)))


def _bench_migratable_counters(env: _Env, lib: MigrationLibrary, n: int,
                               out: list[BenchResult]) -> None:
    samples = []
    for _ in range(n):
        holder: list = []
        samples.append(_timed(
            lambda: holder.append(lib.create_migratable_counter())))
        lib.destroy_migratable_counter(holder[0][0])
    out.append(BenchResult("migratable-create", "counter", n, *_stats(samples),
                           baseline="native-create"))

    slot, _ = lib.create_migratable_counter()
    samples = [_timed(lambda: lib.increment_migratable_counter(slot))
               for _ in range(n)]
    out.append(BenchResult("migratable-increment", "counter", n,
                           *_stats(samples), baseline="native-increment"))
    samples = [_timed(lambda: lib.read_migratable_counter(slot))
               for _ in range(n)]
    out.append(BenchResult("migratable-read", "counter", n, *_stats(samples),
                           baseline="native-read"))
    lib.destroy_migratable_counter(slot)

    samples = []
    for _ in range(n):
        slot, _ = lib.create_migratable_counter()
        samples.append(_timed(
            lambda: lib.destroy_migratable_counter(slot)))
    out.append(BenchResult("migratable-destroy", "counter", n, *_stats(samples),
                           baseline="native-destroy"))


def _bench_sealing(env: _Env, lib: MigrationLibrary, n: int,
                   out: list[BenchResult]) -> None:
    payload = env.sim.rng.randbytes(PAYLOAD_LEN)
    aad = b"bench"
    native_key = sgx.derive_seal_key(env.platform_a, env.identity,
                                     sgx.BY_MRENCLAVE)
    rng = env.sim.rng
    samples = [_timed(lambda: sgx.seal(native_key, payload, aad, rng=rng))
               for _ in range(n)]
    out.append(BenchResult("native-seal", "sealing", n, *_stats(samples)))
    blob = sgx.seal(native_key, payload, aad, rng=rng)
    samples = [_timed(lambda: sgx.unseal(native_key, blob)) for _ in range(n)]
    out.append(BenchResult("native-unseal", "sealing", n, *_stats(samples)))

    samples = [_timed(lambda: lib.seal_migratable(payload, aad))
               for _ in range(n)]
    out.append(BenchResult("migratable-seal", "sealing", n, *_stats(samples),
                           baseline="native-seal"))
    mblob = lib.seal_migratable(payload, aad)
    samples = [_timed(lambda: lib.unseal_migratable(mblob)) for _ in range(n)]
    out.append(BenchResult("migratable-unseal", "sealing", n, *_stats(samples),
                           baseline="native-unseal"))


def _bench_lifecycle(env: _Env, n: int, out: list[BenchResult]) -> None:
    sim = env.sim

    samples = []
    for _ in range(n):
        holder: list[MigrationLibrary] = []
        samples.append(_timed(lambda: holder.append(
            env.new_library(env.machine_a, env.platform_a,
                            InitState.CREATE_NEW, key="bench/init-new"))))
        sim.run()
        holder[0].close()
    out.append(BenchResult("init-new", "lifecycle", n, *_stats(samples)))

    seed_lib = env.new_library(env.machine_a, env.platform_a,
                               InitState.CREATE_NEW, key="bench/init-reload")
    seed_lib.create_migratable_counter()
    sim.run()
    seed_lib.close()
    store = sim.stores[env.vm_id]
    samples = []
    for _ in range(n):
        buffer = store.get("bench/init-reload")
        holder = []
        samples.append(_timed(lambda: holder.append(
            env.new_library(env.machine_a, env.platform_a, InitState.RELOAD,
                            buffer=buffer, key="bench/init-reload"))))
        sim.run()
        holder[0].close()
    out.append(BenchResult("init-reload", "lifecycle", n, *_stats(samples)))

    # end to end move of a library owning one live counter, ping-ponged
    # between the two machines; every sample is one full migration
    sides = [(env.machine_a, env.platform_a), (env.machine_b, env.platform_b)]
    lib = env.new_library(env.machine_a, env.platform_a, InitState.CREATE_NEW,
                          key="bench/e2e")
    sim.run()
    lib.create_migratable_counter()
    lib.increment_migratable_counter(0)
    samples = []
    current = 0
    for _ in range(n):
        dst_machine, dst_platform = sides[1 - current]

        def move(lib=lib, dst_machine=dst_machine, dst_platform=dst_platform):
            lib.migration_start(Address(dst_machine, ME_ENDPOINT))
            sim.run()
            sim.vm_migrate_store(env.vm_id, dst_machine)
            nxt = env.new_library(dst_machine, dst_platform,
                                  InitState.AWAIT_INCOMING, key="bench/e2e")
            sim.run()
            lib.close()
            return nxt

        t0 = perf_counter()
        lib = move()
        samples.append(perf_counter() - t0)
        current = 1 - current
    out.append(BenchResult("migration-e2e", "lifecycle", n, *_stats(samples)))
    lib.close()


def _op_delta(platform: sgx.PlatformState, fn) -> dict[str, int]:
    before = dict(platform.op_counts)
    fn()
    after = platform.op_counts
    return {k: after.get(k, 0) - before.get(k, 0)
            for k in after if after.get(k, 0) != before.get(k, 0)}


def _structural(seed: int) -> dict[str, int]:
    """Hardware counter primitives consumed per library operation."""
    env = _Env(seed)
    sim = env.sim
    lib = env.new_library(env.machine_a, env.platform_a, InitState.CREATE_NEW,
                          key="bench/structural")
    sim.run()
    out: dict[str, int] = {}

    for name, delta in _op_delta(env.platform_a,
                                 lambda: lib.create_migratable_counter()).items():
        out[f"create.{name}"] = delta
    for name, delta in _op_delta(env.platform_a,
                                 lambda: lib.increment_migratable_counter(0)).items():
        out[f"increment.{name}"] = delta
    for name, delta in _op_delta(env.platform_a,
                                 lambda: lib.read_migratable_counter(0)).items():
        out[f"read.{name}"] = delta
    for name, delta in _op_delta(env.platform_a,
                                 lambda: lib.destroy_migratable_counter(0)).items():
        out[f"destroy.{name}"] = delta

    for _ in range(8):
        lib.create_migratable_counter()
    src = _op_delta(env.platform_a, lambda: (
        lib.migration_start(Address(env.machine_b, ME_ENDPOINT)), sim.run()))
    for name, delta in src.items():
        out[f"migration_source_8_counters.{name}"] = delta
    sim.vm_migrate_store(env.vm_id, env.machine_b)
    dst_holder: list[MigrationLibrary] = []
    dst = _op_delta(env.platform_b, lambda: (
        dst_holder.append(env.new_library(env.machine_b, env.platform_b,
                                          InitState.AWAIT_INCOMING,
                                          key="bench/structural")),
        sim.run()))
    for name, delta in dst.items():
        out[f"migration_destination_8_counters.{name}"] = delta
    lib.close()
    dst_holder[0].close()
    return out


def run_bench(iterations: int = 200, seed: int = 0) -> BenchReport:
    report = BenchReport(seed=seed, iterations=iterations)
    env = _Env(seed)
    lib = env.new_library(env.machine_a, env.platform_a, InitState.CREATE_NEW,
                          key="bench/ops")
    env.sim.run()

    _bench_native_counters(env, iterations, report.results)
    _bench_migratable_counters(env, lib, iterations, report.results)
    _bench_sealing(env, lib, iterations, report.results)
    lib.close()
    _bench_lifecycle(env, iterations, report.results)

    by_name = {r.name: r for r in report.results}
    for r in report.results:
        if r.baseline and by_name[r.baseline].mean_us > 0:
            base = by_name[r.baseline].mean_us
            r.overhead_pct = (r.mean_us - base) / base * 100.0

    report.structural = _structural(seed)
    return report
