"""Migratable sealing, offset counters, freeze and hand-off behavior."""

from __future__ import annotations

import random

import pytest

from conftest import build_world
from sgxmigsim import sgx
from sgxmigsim.errors import (
    AuthFailure,
    CounterDestroyFailure,
    CounterLimitExceeded,
    CounterNotFound,
    CounterOverflow,
    Frozen,
    FrozenBuffer,
    NotAwaiting,
)
from sgxmigsim.library import (
    INTERNALS_AAD,
    INTERNALS_LEN,
    MIGRATION_DATA_LEN,
    SLOTS,
    ERROR_CODES,
    InitState,
    LibraryInternals,
    MigrationData,
    MigrationLibrary,
    error_code_for,
    raise_error_by_name,
)
from sgxmigsim.netsim import Address

APP = sgx.make_identity("library-test-app")


def start_lib(world, mes, index, vm_id, endpoint, init=InitState.CREATE_NEW,
              buffer=None, identity=APP):
    lib = MigrationLibrary(world, mes[index].platform, identity,
                           mes[index].identity, vm_id,
                           Address(mes[index].platform.machine, endpoint))
    lib.migration_init(buffer, init, mes[index].address)
    world.run()
    return lib


def migrate(world, mes, lib, vm_id, to_index, endpoint, identity=APP):
    """Full protocol hop; returns the running destination library."""
    lib.migration_start(mes[to_index].address)
    world.run()
    world.vm_migrate_store(vm_id, mes[to_index].platform.machine)
    incoming = start_lib(world, mes, to_index, vm_id, endpoint,
                         init=InitState.AWAIT_INCOMING, identity=identity)
    world.run()
    assert lib.migration_confirmed
    lib.close()
    return incoming


@pytest.fixture
def env():
    world, mes, _ = build_world(seed=42)
    world.add_vm("vm", mes[0].platform.machine)
    return world, mes


# --- wire formats ----------------------------------------------------------------


def test_internals_layout_golden():
    assert INTERNALS_LEN == 4369
    state = LibraryInternals(frozen=True, msk=b"\xAB" * 16)
    state.active[3] = True
    state.uuids[3] = sgx.CounterUuid(5, b"\x11" * 8)
    state.offsets[3] = 77
    raw = state.encode()
    assert len(raw) == INTERNALS_LEN
    assert raw[0] == 1
    assert raw[1:257] == bytes(1 if i == 3 else 0 for i in range(SLOTS))
    uuid_col = 257 + 3 * 12
    assert raw[uuid_col:uuid_col + 12] == (5).to_bytes(4, "big") + b"\x11" * 8
    off_col = 257 + SLOTS * 12 + 3 * 4
    assert raw[off_col:off_col + 4] == (77).to_bytes(4, "big")
    assert raw[-16:] == b"\xAB" * 16
    assert LibraryInternals.decode(raw) == state
    with pytest.raises(AuthFailure):
        LibraryInternals.decode(raw[:-1])


def test_migration_data_layout_golden():
    assert MIGRATION_DATA_LEN == 1296
    data = MigrationData(msk=b"\xCD" * 16)
    data.active[0] = True
    data.values[0] = 7
    raw = data.encode()
    assert len(raw) == MIGRATION_DATA_LEN
    assert raw[0] == 1 and raw[1:256] == bytes(255)
    assert raw[256:260] == (7).to_bytes(4, "big")
    assert raw[-16:] == b"\xCD" * 16
    assert MigrationData.decode(raw) == data


def test_codec_roundtrips_on_random_states():
    rng = random.Random(31)
    for _ in range(25):
        state = LibraryInternals(frozen=rng.random() < 0.5, msk=rng.randbytes(16))
        data = MigrationData(msk=rng.randbytes(16))
        for slot in rng.sample(range(SLOTS), 40):
            state.active[slot] = True
            state.uuids[slot] = sgx.CounterUuid(rng.randrange(2**32),
                                                rng.randbytes(8))
            state.offsets[slot] = rng.randrange(2**32)
            data.active[slot] = True
            data.values[slot] = rng.randrange(2**32)
        assert LibraryInternals.decode(state.encode()) == state
        assert MigrationData.decode(data.encode()) == data


def test_error_code_table_roundtrips():
    for name, code in ERROR_CODES.items():
        with pytest.raises(Exception) as err:
            raise_error_by_name(name, "mapped")
        assert type(err.value).__name__ == name
        assert error_code_for(err.value) == code


# --- initialization ---------------------------------------------------------------


def test_create_new_starts_clean(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    assert lib.internals.frozen is False
    assert lib.internals.msk != bytes(16)
    assert lib.internals.offsets == [0] * SLOTS
    assert lib.internals.active == [False] * SLOTS
    # the fresh state is already persisted, sealed with the native key
    blob = sgx.SealedBlob.decode(lib.persisted_buffer())
    plaintext, aad = sgx.unseal(lib.native_key, blob)
    assert aad == INTERNALS_AAD
    assert LibraryInternals.decode(plaintext) == lib.internals


def test_init_argument_contract(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    with pytest.raises(ValueError):
        start_lib(world, mes, 0, "vm", 10, buffer=b"x")
    with pytest.raises(ValueError):
        start_lib(world, mes, 0, "vm", 11, init=InitState.RELOAD)


def test_reload_restores_everything(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    lib.increment_migratable_counter(slot)
    msk = lib.internals.msk
    buffer = lib.persisted_buffer()
    lib.close()
    again = start_lib(world, mes, 0, "vm", 10, init=InitState.RELOAD, buffer=buffer)
    assert again.internals.msk == msk
    assert again.internals.offsets == lib.internals.offsets
    assert again.read_migratable_counter(slot) == 1


def test_reload_refuses_frozen_buffer(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    lib.migration_start(mes[1].address)
    world.run()
    buffer = lib.persisted_buffer()
    lib.close()
    with pytest.raises(FrozenBuffer):
        start_lib(world, mes, 0, "vm", 10, init=InitState.RELOAD, buffer=buffer)


def test_reload_is_bound_to_enclave_and_machine(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    buffer = lib.persisted_buffer()
    lib.close()
    with pytest.raises(AuthFailure):
        start_lib(world, mes, 0, "vm", 10, init=InitState.RELOAD, buffer=buffer,
                  identity=sgx.make_identity("somebody-else"))
    world.vm_migrate_store("vm", mes[1].platform.machine)
    with pytest.raises(AuthFailure):
        start_lib(world, mes, 1, "vm", 10, init=InitState.RELOAD, buffer=buffer)


def test_awaiting_blocks_application_calls(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    with pytest.raises(Frozen):
        lib.create_migratable_counter()
    with pytest.raises(Frozen):
        lib.seal_migratable(b"x")


# --- counters ----------------------------------------------------------------------


def test_first_counter_is_slot_zero(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    assert lib.create_migratable_counter() == (0, 0)
    assert lib.read_migratable_counter(0) == 0
    assert lib.increment_migratable_counter(0) == 1


def test_effective_value_is_native_plus_offset(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    data = MigrationData(msk=b"\x10" * 16)
    data.active[0] = True
    data.values[0] = 5
    lib.receive_incoming(data)
    assert lib.read_migratable_counter(0) == 5      # native 0, offset 5
    lib.increment_migratable_counter(0)
    assert lib.increment_migratable_counter(0) == 7  # native 2, offset 5


def test_offset_overflow_checked_before_increment(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    data = MigrationData(msk=b"\x10" * 16)
    data.active[0] = True
    data.values[0] = sgx.COUNTER_MAX
    lib.receive_incoming(data)
    with pytest.raises(CounterOverflow):
        lib.increment_migratable_counter(0)
    # the native counter must not have moved
    assert lib.read_migratable_counter(0) == sgx.COUNTER_MAX


def test_destroy_frees_the_slot(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    lib.increment_migratable_counter(slot)
    lib.destroy_migratable_counter(slot)
    with pytest.raises(CounterNotFound):
        lib.read_migratable_counter(slot)
    with pytest.raises(CounterNotFound):
        lib.destroy_migratable_counter(slot)
    # the same slot index comes back fresh, with a new native counter
    again, value = lib.create_migratable_counter()
    assert (again, value) == (slot, 0)
    assert lib.read_migratable_counter(slot) == 0


def test_slot_range_and_inactive_slots(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    for bad in (-1, 7, SLOTS, SLOTS + 5):
        with pytest.raises(CounterNotFound):
            lib.read_migratable_counter(bad)


def test_out_of_band_destruction_surfaces_regardless_of_offset(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    data = MigrationData(msk=b"\x10" * 16)
    data.active[0] = True
    data.values[0] = 1000
    lib.receive_incoming(data)
    sgx.mc_destroy(lib.platform, APP, lib.internals.uuids[0])
    with pytest.raises(CounterNotFound):
        lib.read_migratable_counter(0)


def test_slot_mutations_are_persisted_immediately(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    lib.create_migratable_counter()
    decoded = LibraryInternals.decode(
        sgx.unseal(lib.native_key, sgx.SealedBlob.decode(lib.persisted_buffer()))[0])
    assert decoded.active[0] is True
    lib.destroy_migratable_counter(0)
    decoded = LibraryInternals.decode(
        sgx.unseal(lib.native_key, sgx.SealedBlob.decode(lib.persisted_buffer()))[0])
    assert decoded.active[0] is False


# --- sealing under the travel key ----------------------------------------------------


def test_migratable_seal_roundtrip(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    blob = lib.seal_migratable(b"application state", b"tag")
    assert lib.unseal_migratable(blob) == (b"application state", b"tag")


def test_travel_key_and_native_key_never_interchange(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    travel_blob = lib.seal_migratable(b"travels")
    with pytest.raises(AuthFailure):
        sgx.unseal(lib.native_key, travel_blob)
    native_blob = sgx.seal(lib.native_key, b"stays", rng=lib.platform.rng)
    with pytest.raises(AuthFailure):
        lib.unseal_migratable(native_blob)


# --- freeze and hand-off ---------------------------------------------------------------


def test_freeze_stops_every_application_call(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    blob = lib.seal_migratable(b"x")
    lib.migration_start(mes[1].address)
    world.run()
    for call in (lambda: lib.seal_migratable(b"y"),
                 lambda: lib.unseal_migratable(blob),
                 lambda: lib.create_migratable_counter(),
                 lambda: lib.read_migratable_counter(slot),
                 lambda: lib.increment_migratable_counter(slot),
                 lambda: lib.destroy_migratable_counter(slot),
                 lambda: lib.migration_start(mes[1].address)):
        with pytest.raises(Frozen):
            call()


def test_handoff_reads_then_destroys_every_counter(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slots = [lib.create_migratable_counter()[0] for _ in range(3)]
    for _ in range(7):
        lib.increment_migratable_counter(slots[1])
    uuids = [lib.internals.uuids[s] for s in slots]
    data = lib.migration_start(mes[1].address)
    world.run()
    assert data.values[slots[0]] == 0
    assert data.values[slots[1]] == 7
    assert data.active[slots[0]] and data.active[slots[1]] and data.active[slots[2]]
    assert sum(data.active) == 3
    assert data.msk == lib.internals.msk
    for uuid in uuids:
        with pytest.raises(CounterNotFound):
            sgx.mc_read(lib.platform, APP, uuid)


def test_frozen_flag_lands_before_counter_destruction(env):
    # if a native counter cannot be released the hand-off aborts, but the
    # already-persisted buffer must still refuse to run again
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    sgx.mc_destroy(lib.platform, APP, lib.internals.uuids[slot])
    with pytest.raises(CounterDestroyFailure):
        lib.migration_start(mes[1].address)
    buffer = lib.persisted_buffer()
    lib.close()
    with pytest.raises(FrozenBuffer):
        start_lib(world, mes, 0, "vm", 10, init=InitState.RELOAD, buffer=buffer)


def test_stale_buffer_cannot_reach_old_counters(env):
    # a pre-hand-off buffer reloads, but its counters are gone for good
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    lib.increment_migratable_counter(slot)
    stale = lib.persisted_buffer()
    lib = migrate(world, mes, lib, "vm", 1, 20)
    assert lib.read_migratable_counter(slot) == 1
    world.add_vm("vm-stale", mes[0].platform.machine)
    world.store("vm-stale", mes[0].platform.machine).put("library/internals", stale)
    ghost = start_lib(world, mes, 0, "vm-stale", 21, init=InitState.RELOAD,
                      buffer=stale)
    with pytest.raises(CounterNotFound):
        ghost.read_migratable_counter(slot)
    with pytest.raises(CounterNotFound):
        ghost.increment_migratable_counter(slot)


def test_receive_requires_awaiting_state(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    with pytest.raises(NotAwaiting):
        lib.receive_incoming(MigrationData(msk=b"\x22" * 16))


def test_receive_with_no_counters_installs_only_the_key(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    lib.receive_incoming(MigrationData(msk=b"\x33" * 16))
    assert lib.internals.msk == b"\x33" * 16
    assert lib.internals.offsets == [0] * SLOTS
    assert lib.internals.active == [False] * SLOTS
    assert lib.seal_migratable(b"works now")


def test_receive_rolls_back_when_destination_is_full(env):
    world, mes = env
    plat = mes[0].platform
    for _ in range(255):
        sgx.mc_create(plat, APP)
    lib = start_lib(world, mes, 0, "vm", 9, init=InitState.AWAIT_INCOMING)
    data = MigrationData(msk=b"\x44" * 16)
    data.active[0] = data.active[1] = True
    with pytest.raises(CounterLimitExceeded):
        lib.receive_incoming(data)
    # the one counter it managed to create was rolled back
    assert plat.live_counters(APP.mrenclave) == 255
    with pytest.raises(Frozen):
        lib.read_migratable_counter(0)


# --- across machines ---------------------------------------------------------------


def test_counting_continues_exactly_across_a_hop(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    for _ in range(41):
        lib.increment_migratable_counter(slot)
    lib = migrate(world, mes, lib, "vm", 1, 20)
    assert lib.internals.offsets[slot] == 41
    assert lib.increment_migratable_counter(slot) == 42


def test_offsets_are_replaced_not_summed(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    slot, _ = lib.create_migratable_counter()
    for _ in range(7):
        lib.increment_migratable_counter(slot)
    lib = migrate(world, mes, lib, "vm", 1, 20)
    for _ in range(3):
        lib.increment_migratable_counter(slot)
    assert lib.read_migratable_counter(slot) == 10
    lib = migrate(world, mes, lib, "vm", 0, 30)
    assert lib.internals.offsets[slot] == 10
    assert lib.read_migratable_counter(slot) == 10


def test_travel_key_is_constant_across_hops(env):
    world, mes = env
    lib = start_lib(world, mes, 0, "vm", 9)
    born_msk = lib.internals.msk
    sealed_on_a = lib.seal_migratable(b"from machine a", b"aad")
    lib = migrate(world, mes, lib, "vm", 1, 20)
    assert lib.internals.msk == born_msk
    assert lib.unseal_migratable(sealed_on_a) == (b"from machine a", b"aad")
    lib = migrate(world, mes, lib, "vm", 0, 30)
    assert lib.internals.msk == born_msk
    assert lib.unseal_migratable(sealed_on_a) == (b"from machine a", b"aad")
