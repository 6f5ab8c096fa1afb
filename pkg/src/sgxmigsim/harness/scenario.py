"""Scenario scripts: parsing, execution and assertion checking.

A scenario file is YAML with the top-level keys `name`, `machines`,
`vms`, `enclaves`, `adversary` and `events`. The runner builds a
seeded simulation from the declarations, executes the events in order
(pumping the network to quiescence after each), records outcomes, and
evaluates the `assert` events into a ScenarioReport.

Instances vs declarations: `enclaves` declares code identities; `start`
creates a running instance of one. An instance is addressed by an
alias, defaulting to the declaration name; `start` takes `as:` to pick
a different alias so attack scripts can run several instances of the
same enclave (forks) side by side. The `migrate` macro moves the alias
to the new instance and keeps the retired source reachable as
`<alias>@old-<machine>`.

Event vocabulary (each event is a mapping with an `op` key):
  start / stop / restart    instance lifecycle; start takes init:
                            create_new | reload | await_incoming and an
                            optional buffer: current | <snapshot label>
  snapshot / fork_store     capture an instance's persisted files; clone
                            them into a new VM store on some machine
                            (the attacker's copy of old host state)
  app_persist / app_load    drive the versioned-state demo app
  counter / seal / unseal   raw library operations
  migration_start / migrate hand state to the local ME; `migrate` is the
                            whole move including the VM store relocation
                            and the await_incoming restart
  vm_migrate_store          move a VM's store to another machine
  me_restart / retry        crash-restart a machine's ME; retry a
                            retained migration record
  adversary                 add_rule / clear the adversary policy
  assert                    evaluate a check; see _CHECKS for the list

Any mutating event accepts `expect_error: <ErrorName>`; the scenario
fails hard if the expectation is wrong in either direction.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .. import sgx
from ..enclave import ME_ENDPOINT, MigrationEnclave, OperatorCA, me_identity
from ..errors import ScriptError, SimError
from ..library import InitState, MigrationLibrary
from ..netsim import Address, AdversaryRule, Simulation
from .app import VersionedApp
from .baseline import NaiveMigrationLibrary

MODIFIED_ME_CODE = "migration-enclave-modified"


class RogueMigrationEnclave(MigrationEnclave):
    """Attacker's rebuilt ME: different measurement, accepts any peer."""

    def _accept_peer(self, peer: sgx.EnclaveIdentity) -> bool:
        return True


# --- script model -----------------------------------------------------------

@dataclass
class Scenario:
    name: str
    description: str = ""
    machines: list[dict] = field(default_factory=list)
    vms: list[dict] = field(default_factory=list)
    enclaves: list[dict] = field(default_factory=list)
    adversary: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def parse_scenario(text: str) -> Scenario:
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict) or "name" not in raw:
        raise ScriptError("scenario must be a mapping with a `name` key")
    known = {"name", "description", "machines", "vms", "enclaves", "adversary",
             "events"}
    unknown = set(raw) - known
    if unknown:
        raise ScriptError(f"unknown top-level keys: {sorted(unknown)}")
    return Scenario(
        name=raw["name"],
        description=raw.get("description", ""),
        machines=raw.get("machines", []),
        vms=raw.get("vms", []),
        enclaves=raw.get("enclaves", []),
        adversary=raw.get("adversary", []),
        events=raw.get("events", []),
    )


def bundled_scenarios() -> dict[str, Path]:
    """Name -> path of every scenario shipped with the package."""
    base = importlib.resources.files("sgxmigsim.harness") / "scenarios"
    out: dict[str, Path] = {}
    for entry in sorted(base.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml"):
            out[entry.name[:-len(".yaml")]] = Path(str(entry))
    return out


def find_scenario(ref: str) -> Scenario:
    """Resolve a CLI argument: bundled scenario name or a file path."""
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    bundled = bundled_scenarios()
    if ref in bundled:
        return load_scenario(bundled[ref])
    raise ScriptError(f"no scenario file or bundled scenario named {ref!r}")


# --- report model ------------------------------------------------------------

@dataclass
class AssertResult:
    name: str
    requirement: str
    passed: bool
    detail: str


@dataclass
class ScenarioReport:
    name: str
    seed: int
    mode: str
    asserts: list[AssertResult] = field(default_factory=list)
    event_log: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(a.passed for a in self.asserts)

    def failing(self) -> list[str]:
        out = [a.name for a in self.asserts if not a.passed]
        if self.error is not None:
            out.append(self.error)
        return out


# --- runtime state ------------------------------------------------------------

@dataclass
class Instance:
    """One live (or retired) enclave instance, addressed by alias."""

    name: str
    enclave: str    # declaration this instance was started from
    machine: str
    vm_id: str
    lib: MigrationLibrary | None = None
    app: VersionedApp | None = None
    last_result: str = "ok"
    last_load: str | None = None
    last_load_version: int | None = None
    last_unseal: str | None = None
    last_counter: int | None = None
    final: dict | None = None  # flags captured when the instance stopped

    @property
    def live(self) -> bool:
        return self.lib is not None

    def flag(self, name: str):
        if self.lib is not None:
            if name == "migration_confirmed":
                return self.lib.migration_confirmed
            if name == "status":
                return self.lib.status.value
            if name == "last_me_error":
                return self.lib.last_me_error
            if name == "version":
                return self.app.version if self.app else None
        if self.final is not None:
            return self.final.get(name)
        return None


def _internals_key(enclave: str) -> str:
    return f"enclave/{enclave}/internals"


def _app_key(enclave: str) -> str:
    return f"enclave/{enclave}/app"


class ScenarioRunner:
    """Executes one scenario inside a fresh seeded simulation."""

    def __init__(self, scenario: Scenario, seed: int = 0, mode: str | None = None):
        self.scenario = scenario
        self.seed = seed
        self.mode_override = mode
        self.sim = Simulation(seed)
        self.machine_ids: dict[str, int] = {}
        self.machine_names: dict[int, str] = {}
        self.mes: dict[str, MigrationEnclave] = {}
        self.all_mes: list[MigrationEnclave] = []
        self.operator_cas: dict[str, OperatorCA] = {}
        self.me_kind: dict[str, str] = {}
        self.enclave_decl: dict[str, dict] = {}
        self.instances: dict[str, Instance] = {}
        self.all_libraries: list[MigrationLibrary] = []
        self.snapshots: dict[str, dict[str, bytes]] = {}
        self.sealed_labels: dict[str, bytes] = {}
        self.secret_values: list[bytes] = []
        self.next_endpoint: dict[str, int] = {}
        self.report = ScenarioReport(name=scenario.name, seed=seed,
                                     mode=mode or "script")
        self._build()

    # -- construction from declarations --

    def _build(self) -> None:
        for decl in self.scenario.machines:
            name = decl["name"]
            operator = decl.get("operator", "default-operator")
            kind = decl.get("me", "genuine")
            machine, _ = self.sim.register_machine()
            self.machine_ids[name] = machine
            self.machine_names[machine] = name
            self.next_endpoint[name] = 1
            self.me_kind[name] = kind
            if kind != "none":
                self._start_me(name, operator, kind)
            else:
                self.operator_cas.setdefault(
                    operator, OperatorCA.generate(operator, self.sim.rng))
        for decl in self.scenario.vms:
            self.sim.add_vm(decl["name"], self._machine(decl["machine"]))
        for decl in self.scenario.enclaves:
            self.enclave_decl[decl["name"]] = decl
        for rule in self.scenario.adversary:
            self.sim.adversary.rules.append(self._parse_rule(rule))

    def _start_me(self, machine_name: str, operator: str,
                  kind: str) -> MigrationEnclave:
        ca = self.operator_cas.setdefault(
            operator, OperatorCA.generate(operator, self.sim.rng))
        platform = self.sim.machines[self._machine(machine_name)]
        if kind == "modified":
            me = RogueMigrationEnclave(self.sim, platform,
                                       identity=sgx.make_identity(MODIFIED_ME_CODE))
        else:
            me = MigrationEnclave(self.sim, platform)
        me.setup(ca.issue(self.sim.rng))
        me._operator_name = operator  # remembered for crash-restart
        self.mes[machine_name] = me
        self.all_mes.append(me)
        return me

    def _parse_rule(self, raw: dict) -> AdversaryRule:
        def addr(val):
            if val is None:
                return None
            return Address(self._machine(val["machine"]), val.get("endpoint", 0))

        return AdversaryRule(
            action=raw["action"],
            from_machine=self._machine(raw["from_machine"])
            if "from_machine" in raw else None,
            from_endpoint=raw.get("from_endpoint"),
            to_machine=self._machine(raw["to_machine"])
            if "to_machine" in raw else None,
            to_endpoint=raw.get("to_endpoint"),
            frame_type=raw.get("frame_type"),
            times=raw.get("times", 1),
            ticks=raw.get("ticks", 1),
            payload=bytes.fromhex(raw.get("payload_hex", "")),
            inject_src=addr(raw.get("from")),
            inject_dst=addr(raw.get("to")),
            max_matches=raw.get("max_matches"),
        )

    # -- helpers --

    def _machine(self, name: str) -> int:
        if name not in self.machine_ids:
            raise ScriptError(f"unknown machine {name!r}")
        return self.machine_ids[name]

    def _decl(self, enclave: str) -> dict:
        if enclave not in self.enclave_decl:
            raise ScriptError(f"unknown enclave declaration {enclave!r}")
        return self.enclave_decl[enclave]

    def _identity(self, enclave: str) -> sgx.EnclaveIdentity:
        decl = self._decl(enclave)
        return sgx.make_identity(decl.get("code", enclave),
                                 decl.get("signer", "vendor"))

    def _mode(self, enclave: str) -> str:
        if self.mode_override is not None:
            return self.mode_override
        return self._decl(enclave).get("mode", "full")

    def _instance(self, ev: dict, live_only: bool = True) -> Instance:
        alias = ev["enclave"]
        inst = self.instances.get(alias)
        if inst is None:
            raise ScriptError(f"no instance named {alias!r}")
        if live_only and not inst.live:
            raise ScriptError(f"instance {alias!r} is not running")
        return inst

    def _pump(self) -> None:
        self.sim.run()

    # -- event execution --

    def run(self) -> ScenarioReport:
        try:
            for index, ev in enumerate(self.scenario.events):
                self._event(index, ev)
        except ScriptError as exc:
            self.report.error = str(exc)
        except SimError as exc:
            self.report.error = f"unexpected {type(exc).__name__}: {exc}"
        self.report.event_log = list(self.sim.log)
        return self.report

    def _event(self, index: int, ev: dict) -> None:
        op = ev.get("op")
        if op is None:
            raise ScriptError(f"event {index} has no op")
        self.sim.note(f"event[{index}] {op} "
                      + " ".join(f"{k}={v}" for k, v in sorted(ev.items())
                                 if k not in ("op", "name")))
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise ScriptError(f"unknown event op {op!r}")
        if op in ("assert", "snapshot", "adversary"):
            handler(ev)
            return
        expect = ev.get("expect_error")
        try:
            handler(ev)
        except ScriptError:
            raise
        except SimError as exc:
            kind = type(exc).__name__
            if expect is None:
                raise ScriptError(
                    f"event {index} ({op}) raised unexpected {kind}: {exc}") from exc
            if kind != expect:
                raise ScriptError(
                    f"event {index} ({op}) raised {kind}, expected {expect}") from exc
            self._record_error(ev, kind)
            self.sim.note(f"event[{index}] {op} failed as expected: {kind}")
        else:
            if expect is not None:
                raise ScriptError(
                    f"event {index} ({op}) succeeded but {expect} was expected")
        self._pump()

    def _record_error(self, ev: dict, kind: str) -> None:
        alias = ev.get("as", ev.get("enclave"))
        if alias is None:
            return
        inst = self.instances.get(alias)
        if inst is not None:
            inst.last_result = f"error:{kind}"

    # -- lifecycle events --

    def _op_start(self, ev: dict) -> None:
        decl_name = ev["enclave"]
        decl = self._decl(decl_name)
        alias = ev.get("as", decl_name)
        existing = self.instances.get(alias)
        if existing is not None and existing.live:
            raise ScriptError(f"instance {alias!r} is already running")
        vm_id = ev.get("vm", decl["vm"])
        if vm_id not in self.sim.stores:
            raise ScriptError(f"unknown vm {vm_id!r}")
        machine_id = self.sim.store_location[vm_id]
        machine = self.machine_names[machine_id]
        init = InitState(ev.get("init", "create_new"))
        buffer = self._resolve_buffer(ev, decl_name, vm_id, init)
        platform = self.sim.machines[machine_id]
        address = Address(machine_id, self.next_endpoint[machine])
        self.next_endpoint[machine] += 1
        cls = NaiveMigrationLibrary if self._mode(decl_name) == "baseline" \
            else MigrationLibrary
        lib = cls(self.sim, platform, self._identity(decl_name), me_identity(),
                  vm_id, address, storage_key=_internals_key(decl_name))
        inst = Instance(name=alias, enclave=decl_name, machine=machine,
                        vm_id=vm_id, lib=lib,
                        app=VersionedApp(lib, _app_key(decl_name)))
        self.instances[alias] = inst
        self.all_libraries.append(lib)
        try:
            lib.migration_init(buffer, init, Address(machine_id, ME_ENDPOINT))
        except SimError:
            lib.close()
            inst.lib = None
            inst.app = None
            raise

    def _resolve_buffer(self, ev: dict, enclave: str, vm_id: str,
                        init: InitState) -> bytes | None:
        ref = ev.get("buffer", "current" if init is InitState.RELOAD else "none")
        if ref == "none":
            return None
        if ref == "current":
            raw = self.sim.stores[vm_id].get(_internals_key(enclave))
            if raw is None:
                raise ScriptError(f"no persisted state for {enclave!r} in {vm_id!r}")
            return raw
        snap = self.snapshots.get(ref)
        if snap is None:
            raise ScriptError(f"unknown snapshot {ref!r}")
        raw = snap.get(_internals_key(enclave))
        if raw is None:
            raise ScriptError(f"snapshot {ref!r} holds no state for {enclave!r}")
        return raw

    def _op_stop(self, ev: dict) -> None:
        inst = self._instance(ev)
        self._stop_instance(inst)

    def _stop_instance(self, inst: Instance) -> None:
        assert inst.lib is not None
        inst.final = {
            "migration_confirmed": inst.lib.migration_confirmed,
            "status": inst.lib.status.value,
            "last_me_error": inst.lib.last_me_error,
            "version": inst.app.version if inst.app else None,
        }
        inst.lib.close()
        inst.lib = None
        inst.app = None

    def _op_restart(self, ev: dict) -> None:
        inst = self._instance(ev)
        self._stop_instance(inst)
        self._pump()
        self._op_start({"enclave": inst.enclave, "as": inst.name,
                        "vm": inst.vm_id, "init": ev.get("init", "reload"),
                        "buffer": ev.get("buffer", "current")})

    def _op_snapshot(self, ev: dict) -> None:
        inst = self._instance(ev, live_only=False)
        store = self.sim.stores[inst.vm_id]
        snap: dict[str, bytes] = {}
        for store_key in (_internals_key(inst.enclave), _app_key(inst.enclave)):
            value = store.get(store_key)
            if value is not None:
                snap[store_key] = value
        self.snapshots[ev["label"]] = snap
        self.sim.note(f"snapshot {ev['label']!r} of {inst.name} "
                      f"({len(snap)} entries)")

    def _op_fork_store(self, ev: dict) -> None:
        snap = self.snapshots.get(ev["label"])
        if snap is None:
            raise ScriptError(f"unknown snapshot {ev['label']!r}")
        store = self.sim.add_vm(ev["vm"], self._machine(ev["machine"]))
        for store_key, value in snap.items():
            store.put(store_key, value)

    # -- app and library events --

    def _op_app_persist(self, ev: dict) -> None:
        inst = self._instance(ev)
        payload = str(ev.get("payload", "payload")).encode()
        version = inst.app.persist(payload)
        inst.last_result = "ok"
        self.sim.note(f"app {inst.name} persisted version {version}")

    def _op_app_load(self, ev: dict) -> None:
        inst = self._instance(ev)
        package = None
        ref = ev.get("package", "current")
        if ref != "current":
            snap = self.snapshots.get(ref)
            if snap is None:
                raise ScriptError(f"unknown snapshot {ref!r}")
            package = snap.get(_app_key(inst.enclave))
            if package is None:
                raise ScriptError(f"snapshot {ref!r} holds no app package")
        result = inst.app.load(package)
        inst.last_load = result.outcome()
        inst.last_load_version = result.version
        self.sim.note(f"app {inst.name} load -> {inst.last_load} "
                      f"version={result.version} current={result.current}")

    def _op_counter(self, ev: dict) -> None:
        inst = self._instance(ev)
        action = ev["action"]
        slot = ev.get("slot", 0)
        lib = inst.lib
        if action == "create":
            slot, value = lib.create_migratable_counter()
            inst.last_counter = value
        elif action == "read":
            inst.last_counter = lib.read_migratable_counter(slot)
        elif action == "increment":
            inst.last_counter = lib.increment_migratable_counter(slot)
        elif action == "destroy":
            lib.destroy_migratable_counter(slot)
        else:
            raise ScriptError(f"unknown counter action {action!r}")
        inst.last_result = "ok"

    def _op_seal(self, ev: dict) -> None:
        inst = self._instance(ev)
        blob = inst.lib.seal_migratable(str(ev["data"]).encode(),
                                        b"scenario-seal")
        self.sealed_labels[ev["label"]] = blob.encode()

    def _op_unseal(self, ev: dict) -> None:
        inst = self._instance(ev)
        raw = self.sealed_labels.get(ev["label"])
        if raw is None:
            raise ScriptError(f"unknown sealed label {ev['label']!r}")
        plaintext, _ = inst.lib.unseal_migratable(sgx.SealedBlob.decode(raw))
        inst.last_unseal = plaintext.decode("utf-8", "replace")

    # -- migration events --

    def _op_migration_start(self, ev: dict) -> None:
        inst = self._instance(ev)
        dest = Address(self._machine(ev["to"]), ME_ENDPOINT)
        data = inst.lib.migration_start(dest)
        self.secret_values.append(data.encode_values())
        self.secret_values.append(data.encode())

    def _op_migrate(self, ev: dict) -> None:
        """Full move: hand state to the ME, relocate the VM store, restart
        the enclave at the destination, then retire the frozen source."""
        inst = self._instance(ev)
        alias = inst.name
        self._op_migration_start(ev)
        self._pump()
        self.sim.vm_migrate_store(inst.vm_id, self._machine(ev["to"]))
        retired = f"{alias}@old-{inst.machine}"
        if retired in self.instances:
            raise ScriptError(f"retired alias {retired!r} already taken")
        del self.instances[alias]
        inst.name = retired
        self.instances[retired] = inst
        self._op_start({"enclave": inst.enclave, "as": alias,
                        "vm": inst.vm_id, "init": "await_incoming"})
        self._pump()
        self._stop_instance(inst)

    def _op_vm_migrate_store(self, ev: dict) -> None:
        self.sim.vm_migrate_store(ev["vm"], self._machine(ev["to"]))

    def _op_me_restart(self, ev: dict) -> None:
        machine = ev["machine"]
        me = self.mes.get(machine)
        if me is None:
            raise ScriptError(f"no ME on machine {machine!r}")
        operator = getattr(me, "_operator_name", "default-operator")
        me.crash()
        self._pump()
        self._start_me(machine, operator, self.me_kind.get(machine, "genuine"))

    def _op_retry(self, ev: dict) -> None:
        me = self.mes.get(ev["machine"])
        if me is None:
            raise ScriptError(f"no ME on machine {ev['machine']!r}")
        mrenclave = self._identity(ev["source_enclave"]).mrenclave
        dest = Address(self._machine(ev["to"]), ME_ENDPOINT) if "to" in ev else None
        me.retry(mrenclave, dest)

    def _op_adversary(self, ev: dict) -> None:
        action = ev.get("action", "add_rule")
        if action == "clear":
            self.sim.adversary.rules.clear()
        elif action == "add_rule":
            self.sim.adversary.rules.append(self._parse_rule(ev["rule"]))
        else:
            raise ScriptError(f"unknown adversary action {action!r}")

    # -- asserts --

    def _op_assert(self, ev: dict) -> None:
        name = ev.get("name", ev.get("check", "assert"))
        requirement = str(ev.get("requirement", "-"))
        check = ev.get("check")
        evaluator = _CHECKS.get(check)
        if evaluator is None:
            raise ScriptError(f"unknown assert check {check!r}")
        try:
            passed, detail = evaluator(self, ev)
        except ScriptError:
            raise
        except SimError as exc:
            passed, detail = False, f"check raised {type(exc).__name__}"
        self.report.asserts.append(
            AssertResult(name=name, requirement=requirement, passed=passed,
                         detail=detail))
        self.sim.note(f"assert [{requirement}] {'PASS' if passed else 'FAIL'} "
                      f"{name}: {detail}")

    # check implementations; each returns (passed, detail)

    def _lookup(self, ev: dict) -> Instance | None:
        return self.instances.get(ev["enclave"])

    def _check_last_load(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.last_load if inst else None
        return actual == ev["equals"], f"last_load={actual!r}"

    def _check_last_load_version(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.last_load_version if inst else None
        return actual == ev["equals"], f"last_load_version={actual!r}"

    def _check_last_error(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.last_result if inst else None
        return actual == f"error:{ev['equals']}", f"last_result={actual!r}"

    def _check_last_unseal(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.last_unseal if inst else None
        return actual == ev["equals"], f"last_unseal={actual!r}"

    def _check_last_counter(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.last_counter if inst else None
        return actual == ev["equals"], f"last_counter={actual!r}"

    def _check_counter_value(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        if inst is None or not inst.live:
            return False, "instance not running"
        try:
            actual: object = inst.lib.read_migratable_counter(ev.get("slot", 0))
        except SimError as exc:
            actual = f"error:{type(exc).__name__}"
        return actual == ev["equals"], f"counter={actual!r}"

    def _check_app_version(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.flag("version") if inst else None
        return actual == ev["equals"], f"app_version={actual!r}"

    def _check_live(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = bool(inst and inst.live)
        return actual == bool(ev["equals"]), f"live={actual}"

    def _check_frozen(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        status = inst.flag("status") if inst else None
        return (status == "frozen") == bool(ev["equals"]), f"status={status!r}"

    def _check_migration_confirmed(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = bool(inst.flag("migration_confirmed")) if inst else None
        return actual == bool(ev["equals"]), f"migration_confirmed={actual}"

    def _check_last_me_error(self, ev: dict) -> tuple[bool, str]:
        inst = self._lookup(ev)
        actual = inst.flag("last_me_error") if inst else None
        return actual == ev["equals"], f"last_me_error={actual!r}"

    def _check_record_retained(self, ev: dict) -> tuple[bool, str]:
        me = self.mes.get(ev["machine"])
        if me is None:
            return False, f"no ME on {ev['machine']!r}"
        record = me.outbound_record(self._identity(ev["source_enclave"]).mrenclave)
        retained = record is not None
        detail = f"retained={retained}"
        if record is not None:
            detail += f" state={record.state.name} error={record.last_error!r}"
        if retained != bool(ev["equals"]):
            return False, detail
        if "error" in ev and (record is None or record.last_error != ev["error"]):
            return False, detail
        return True, detail

    def _check_record_buffered(self, ev: dict) -> tuple[bool, str]:
        me = self.mes.get(ev["machine"])
        if me is None:
            return False, f"no ME on {ev['machine']!r}"
        buffered = me.buffered_incoming(
            self._identity(ev["source_enclave"]).mrenclave)
        undelivered = [r for r in buffered if not r.delivery_attempted]
        actual = len(undelivered) > 0
        return actual == bool(ev["equals"]), f"buffered_undelivered={len(undelivered)}"

    def _check_secrecy(self, ev: dict) -> tuple[bool, str]:
        secrets: list[bytes] = list(self.secret_values)
        for lib in self.all_libraries:
            secrets.extend(lib.secret_material())
        payloads = self.sim.adversary.recorded_payloads()
        hits = 0
        for payload in payloads:
            for secret in secrets:
                if secret and secret in payload:
                    hits += 1
        return hits == 0, (f"{len(payloads)} recorded payloads, "
                           f"{len(secrets)} secrets, {hits} leaks")

    def _check_delivery_identity(self, ev: dict) -> tuple[bool, str]:
        pairs = [p for me in self.all_mes for p in me.delivery_audit]
        bad = [p for p in pairs if p[0] != p[1]]
        return len(bad) == 0, (f"{len(pairs)} deliveries, "
                               f"{len(bad)} identity mismatches")


_CHECKS = {
    "last_load": ScenarioRunner._check_last_load,
    "last_load_version": ScenarioRunner._check_last_load_version,
    "last_error": ScenarioRunner._check_last_error,
    "last_unseal": ScenarioRunner._check_last_unseal,
    "last_counter": ScenarioRunner._check_last_counter,
    "counter_value": ScenarioRunner._check_counter_value,
    "app_version": ScenarioRunner._check_app_version,
    "live": ScenarioRunner._check_live,
    "frozen": ScenarioRunner._check_frozen,
    "migration_confirmed": ScenarioRunner._check_migration_confirmed,
    "last_me_error": ScenarioRunner._check_last_me_error,
    "record_retained": ScenarioRunner._check_record_retained,
    "record_buffered": ScenarioRunner._check_record_buffered,
    "secrecy": ScenarioRunner._check_secrecy,
    "delivery_identity": ScenarioRunner._check_delivery_identity,
}


def run_scenario(scenario: Scenario | str | Path, seed: int = 0,
                 mode: str | None = None) -> ScenarioReport:
    """Execute a scenario (object, bundled name, or path) and report."""
    if not isinstance(scenario, Scenario):
        scenario = find_scenario(str(scenario))
    return ScenarioRunner(scenario, seed=seed, mode=mode).run()


def run_rollback_scenario(mode: str = "full", seed: int = 0) -> ScenarioReport:
    """Run the bundled rollback attack script in the given library mode."""
    name = "rollback_attack_full" if mode == "full" else "rollback_attack_baseline"
    return run_scenario(name, seed=seed)


def run_fork_scenario(mode: str = "full", seed: int = 0) -> ScenarioReport:
    """Run the bundled fork attack script in the given library mode."""
    name = "fork_attack_full" if mode == "full" else "fork_attack_baseline"
    return run_scenario(name, seed=seed)
