"""Migration library: migratable sealing and migratable monotonic counters.

Linked into an application enclave, the library wraps the native sealing
and counter primitives so that persistent state survives a controlled
move to another machine:

* data is sealed under a migration sealing key (MSK) that is generated
  once at first start and then carried to every future machine, instead
  of the machine-bound native seal key;
* counters are virtualized as 256 slots, each backed by a native
  hardware counter plus a per-slot offset; the effective value is
  native + offset. On migration the source destroys its native counters
  and ships the effective values; the destination stores them as offsets
  over fresh native counters, so effective values never move backwards
  and old machines cannot serve stale values.

The library's own bookkeeping is sealed with the native, machine-bound
key and persisted to the enclave's VM store after every slot mutation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from . import sgx
from .errors import (
    AttestationFailure,
    AuthFailure,
    ChannelFailure,
    CounterDestroyFailure,
    CounterLimitExceeded,
    CounterNotFound,
    Frozen,
    FrozenBuffer,
    MigrationBusy,
    NotAwaiting,
    NotProvisioned,
    OperatorMismatch,
    PeerIdentityMismatch,
    SimError,
    StoreLocality,
    UnknownEndpoint,
)
from .netsim import (
    ADDRESS_LEN,
    FRAME_LOCAL_ATTEST,
    FRAME_LOCAL_ATTEST_OK,
    Address,
    AttestedChannel,
    Envelope,
    LocalHandshake,
    Simulation,
    parse_frame,
)

SLOTS = 256
INTERNALS_AAD = b"library-internals"
_NO_UUID = bytes(12)  # wire placeholder for an empty uuid column

# local frames between an application enclave's library and its machine's
# migration enclave; 0x0E/0x0F handshake frames are defined in netsim
FRAME_MIGRATE_REQUEST = 0x10   # AEAD: destination address(10) + migration data
FRAME_INCOMING_DATA = 0x11     # AEAD: migration data
FRAME_CONFIRM_LOCAL = 0x12     # AEAD: empty
FRAME_ERROR_LOCAL = 0x13       # AEAD: error code(1)

# error codes carried in ERROR frames (local and machine-to-machine)
ERROR_CODES = {
    "NotAwaiting": 1,
    "CounterLimitExceeded": 2,
    "Frozen": 3,
    "AuthFailure": 4,
    "ChannelFailure": 5,
    "StoreLocality": 6,
    "MigrationBusy": 7,
    "NotProvisioned": 8,
    "PeerIdentityMismatch": 9,
    "OperatorMismatch": 10,
    "AttestationFailure": 11,
}
CODE_ERRORS = {code: name for name, code in ERROR_CODES.items()}

_ERROR_CLASSES = {
    "NotAwaiting": NotAwaiting,
    "CounterLimitExceeded": CounterLimitExceeded,
    "Frozen": Frozen,
    "AuthFailure": AuthFailure,
    "ChannelFailure": ChannelFailure,
    "StoreLocality": StoreLocality,
    "MigrationBusy": MigrationBusy,
    "NotProvisioned": NotProvisioned,
    "PeerIdentityMismatch": PeerIdentityMismatch,
    "OperatorMismatch": OperatorMismatch,
    "AttestationFailure": AttestationFailure,
}


def error_code_for(exc: SimError) -> int:
    return ERROR_CODES.get(type(exc).__name__, ERROR_CODES["ChannelFailure"])


class InitState(Enum):
    CREATE_NEW = "create_new"
    RELOAD = "reload"
    AWAIT_INCOMING = "await_incoming"


class _Status(Enum):
    RUNNING = "running"
    AWAITING = "awaiting"
    FROZEN = "frozen"


@dataclass
class LibraryInternals:
    """Library bookkeeping, sealed with the native key and persisted.

    Canonical plaintext layout (4369 bytes):
    frozen(1) || active flags(256, one 0/1 byte per slot)
    || counter uuids(256 x 12: counter_id(4 BE) + nonce(8), zeroed when absent)
    || counter offsets(256 x 4 BE) || msk(16).
    """

    frozen: bool = False
    active: list[bool] = field(default_factory=lambda: [False] * SLOTS)
    uuids: list[sgx.CounterUuid | None] = field(default_factory=lambda: [None] * SLOTS)
    offsets: list[int] = field(default_factory=lambda: [0] * SLOTS)
    msk: bytes = b"\x00" * sgx.KEY_LEN

    def encode(self) -> bytes:
        return b"".join([
            bytes([1 if self.frozen else 0]),
            bytes(self.active),  # bools are ints, so this is the 0/1 byte row
            b"".join(u.encode() if u is not None else _NO_UUID for u in self.uuids),
            struct.pack(">256I", *self.offsets),
            self.msk,
        ])

    @classmethod
    def decode(cls, raw: bytes) -> "LibraryInternals":
        expect = 1 + SLOTS + SLOTS * 12 + SLOTS * 4 + sgx.KEY_LEN
        if len(raw) != expect:
            raise AuthFailure("internals buffer has wrong length")
        frozen = raw[0] == 1
        active = [b == 1 for b in raw[1:1 + SLOTS]]
        uuids: list[sgx.CounterUuid | None] = []
        base = 1 + SLOTS
        for i in range(SLOTS):
            chunk = raw[base + i * 12: base + (i + 1) * 12]
            if chunk == _NO_UUID:
                uuids.append(None)
            else:
                uuids.append(sgx.CounterUuid.decode(chunk))
        base += SLOTS * 12
        offsets = list(struct.unpack(">256I", raw[base: base + SLOTS * 4]))
        base += SLOTS * 4
        msk = raw[base: base + sgx.KEY_LEN]
        return cls(frozen=frozen, active=active, uuids=uuids, offsets=offsets, msk=msk)


INTERNALS_LEN = 1 + SLOTS + SLOTS * 12 + SLOTS * 4 + sgx.KEY_LEN


@dataclass
class MigrationData:
    """State shipped between machines: 256 + 1024 + 16 = 1296 bytes.

    active flags(256 x 0/1) || effective counter values(256 x 4 BE) || msk(16).
    """

    active: list[bool] = field(default_factory=lambda: [False] * SLOTS)
    values: list[int] = field(default_factory=lambda: [0] * SLOTS)
    msk: bytes = b"\x00" * sgx.KEY_LEN

    def encode(self) -> bytes:
        return bytes(self.active) + struct.pack(">256I", *self.values) + self.msk

    def encode_values(self) -> bytes:
        return struct.pack(">256I", *self.values)

    @classmethod
    def decode(cls, raw: bytes) -> "MigrationData":
        if len(raw) != MIGRATION_DATA_LEN:
            raise ChannelFailure("migration data has wrong length")
        active = [b == 1 for b in raw[:SLOTS]]
        values = list(struct.unpack(">256I", raw[SLOTS: SLOTS + SLOTS * 4]))
        msk = raw[SLOTS + SLOTS * 4:]
        return cls(active=active, values=values, msk=msk)


MIGRATION_DATA_LEN = SLOTS + SLOTS * 4 + sgx.KEY_LEN


class MigrationLibrary:
    """Per-enclave handle exposing the migratable persistence API.

    Lives at a network endpoint so its machine's migration enclave can
    push incoming state and confirmations over the local attested channel.
    """

    def __init__(self, sim: Simulation, platform: sgx.PlatformState,
                 identity: sgx.EnclaveIdentity, me_identity: sgx.EnclaveIdentity,
                 vm_id: str, address: Address,
                 storage_key: str = "library/internals"):
        self.sim = sim
        self.platform = platform
        self.identity = identity
        self.me_identity = me_identity
        self.vm_id = vm_id
        self.address = address
        self.storage_key = storage_key
        self.native_key = sgx.derive_seal_key(platform, identity, sgx.BY_MRENCLAVE)
        self.internals = LibraryInternals()
        self.status = _Status.AWAITING
        self.me_address: Address | None = None
        self.channel: AttestedChannel | None = None
        self._handshake: LocalHandshake | None = None
        self.migration_confirmed = False
        self.last_me_error: str | None = None
        self.closed = False
        sim.register_endpoint(address, self._handle)

    # -- lifecycle --

    def migration_init(self, buffer: bytes | None, init_state: InitState,
                       me_address: Address) -> None:
        """Initialize library state and open the local channel to the ME.

        CREATE_NEW mints a fresh MSK and empty slot table. RELOAD restores
        state from a buffer previously persisted by this enclave on this
        machine; a frozen buffer is refused outright. AWAIT_INCOMING
        discards any local buffer and blocks application calls until a
        migration delivers replacement state.
        """
        if init_state is InitState.CREATE_NEW:
            if buffer is not None:
                raise ValueError("CREATE_NEW takes no buffer")
            self.internals = LibraryInternals(msk=self.platform.rng.randbytes(sgx.KEY_LEN))
            self.status = _Status.RUNNING
            self._persist()
        elif init_state is InitState.RELOAD:
            if buffer is None:
                raise ValueError("RELOAD requires a buffer")
            blob = sgx.SealedBlob.decode(buffer)
            plaintext, _ = sgx.unseal(self.native_key, blob)
            internals = LibraryInternals.decode(plaintext)
            if internals.frozen:
                raise FrozenBuffer("persisted state is frozen after migration")
            self.internals = internals
            self.status = _Status.RUNNING
        elif init_state is InitState.AWAIT_INCOMING:
            # any leftover buffer belongs to a previous residency of this
            # enclave; incoming state replaces it wholesale
            self.internals = LibraryInternals()
            self.status = _Status.AWAITING
        else:
            raise ValueError(f"unknown init state {init_state}")

        self.me_address = me_address
        self._handshake, msg = LocalHandshake.initiate(
            self.platform, self.identity, self.me_identity, self.platform.rng)
        try:
            self.sim.send(self.address, me_address,
                          self._frame_clear(FRAME_LOCAL_ATTEST, msg))
        except UnknownEndpoint:
            raise AttestationFailure(f"no migration enclave at {me_address.fmt()}") from None

    def close(self) -> None:
        """Tear the handle down (enclave stop); persisted state remains."""
        self.sim.unregister_endpoint(self.address)
        self.closed = True

    # -- application-facing persistence API --

    def seal_migratable(self, plaintext: bytes, aad: bytes = b"") -> sgx.SealedBlob:
        self._require_running()
        return sgx.seal(self.internals.msk, plaintext, aad, rng=self.platform.rng)

    def unseal_migratable(self, blob: sgx.SealedBlob) -> tuple[bytes, bytes]:
        self._require_running()
        return sgx.unseal(self.internals.msk, blob)

    def create_migratable_counter(self) -> tuple[int, int]:
        """Allocate the lowest free slot; returns (slot, effective value 0)."""
        self._require_running()
        slot = next((i for i in range(SLOTS) if not self.internals.active[i]), None)
        if slot is None:
            raise CounterLimitExceeded("all 256 slots in use")
        uuid, _ = sgx.mc_create(self.platform, self.identity)
        self.internals.active[slot] = True
        self.internals.uuids[slot] = uuid
        self.internals.offsets[slot] = 0
        self._persist()
        return slot, 0

    def read_migratable_counter(self, slot: int) -> int:
        self._require_running()
        uuid = self._slot_uuid(slot)
        return sgx.mc_read(self.platform, self.identity, uuid) + self.internals.offsets[slot]

    def increment_migratable_counter(self, slot: int) -> int:
        self._require_running()
        uuid = self._slot_uuid(slot)
        offset = self.internals.offsets[slot]
        native = sgx.mc_read(self.platform, self.identity, uuid)
        if native + offset + 1 > sgx.COUNTER_MAX:
            raise sgx.CounterOverflow("effective value at 32-bit maximum")
        return sgx.mc_increment(self.platform, self.identity, uuid) + offset

    def destroy_migratable_counter(self, slot: int) -> None:
        """Release a slot; the slot index may be reused by a later create."""
        self._require_running()
        uuid = self._slot_uuid(slot)
        sgx.mc_destroy(self.platform, self.identity, uuid)
        self.internals.active[slot] = False
        self.internals.uuids[slot] = None
        self.internals.offsets[slot] = 0
        self._persist()

    # -- migration --

    def migration_start(self, destination: Address) -> MigrationData:
        """Freeze this instance and hand all persistent state to the local ME.

        Order is deliberate: the frozen flag is persisted before any
        counter is touched, then every active native counter is read and
        destroyed (each destruction must succeed), and only then does the
        assembled state leave the enclave. After this call every
        application-facing method raises Frozen.
        """
        self._require_running()
        if self.channel is None:
            raise ChannelFailure("local ME channel not established")
        self.internals.frozen = True
        self._persist()
        self.status = _Status.FROZEN
        values = self._collect_and_release_counters()
        data = MigrationData(active=list(self.internals.active), values=values,
                             msk=self.internals.msk)
        inner = destination.encode() + data.encode()
        self._send_frame(FRAME_MIGRATE_REQUEST, inner)
        return data

    def _collect_and_release_counters(self) -> list[int]:
        """Read each active counter's effective value, then destroy it."""
        values = [0] * SLOTS
        for slot in range(SLOTS):
            if not self.internals.active[slot]:
                continue
            uuid = self.internals.uuids[slot]
            try:
                native = sgx.mc_read(self.platform, self.identity, uuid)
                sgx.mc_destroy(self.platform, self.identity, uuid)
            except SimError as exc:
                raise CounterDestroyFailure(
                    f"slot {slot} could not be released: {type(exc).__name__}") from exc
            values[slot] = native + self.internals.offsets[slot]
            self.internals.uuids[slot] = None
        self._persist()
        return values

    def receive_incoming(self, data: MigrationData) -> None:
        """Install migrated state: MSK, then per-slot offset plus a fresh
        native counter so effective values continue exactly where the
        source froze them."""
        if self.status is not _Status.AWAITING:
            raise NotAwaiting("library is not awaiting incoming state")
        internals = LibraryInternals(msk=data.msk)
        created: list[sgx.CounterUuid] = []
        try:
            for slot in range(SLOTS):
                if not data.active[slot]:
                    continue
                uuid, _ = sgx.mc_create(self.platform, self.identity)
                created.append(uuid)
                internals.active[slot] = True
                internals.uuids[slot] = uuid
                internals.offsets[slot] = data.values[slot]
        except SimError:
            for uuid in created:
                sgx.mc_destroy(self.platform, self.identity, uuid)
            raise
        internals.frozen = False
        self.internals = internals
        self.status = _Status.RUNNING
        self._persist()

    # -- internals --

    def _require_running(self) -> None:
        if self.status is _Status.FROZEN:
            raise Frozen("state was migrated away; this instance is frozen")
        if self.status is _Status.AWAITING:
            raise Frozen("no state installed yet; awaiting incoming migration")

    def _slot_uuid(self, slot: int) -> sgx.CounterUuid:
        if not 0 <= slot < SLOTS:
            raise CounterNotFound(f"slot {slot} out of range")
        if not self.internals.active[slot] or self.internals.uuids[slot] is None:
            raise CounterNotFound(f"slot {slot} has no live counter")
        return self.internals.uuids[slot]

    def _persist(self) -> None:
        store = self.sim.store(self.vm_id, self.platform.machine)
        blob = sgx.seal(self.native_key, self.internals.encode(), INTERNALS_AAD,
                        rng=self.platform.rng)
        store.put(self.storage_key, blob.encode())

    def persisted_buffer(self) -> bytes | None:
        store = self.sim.store(self.vm_id, self.platform.machine)
        return store.get(self.storage_key)

    # -- local channel plumbing --

    def _frame_clear(self, frame_type: int, body: bytes) -> bytes:
        from .netsim import encode_frame
        return encode_frame(frame_type, body)

    def _send_frame(self, frame_type: int, inner: bytes) -> None:
        if self.channel is None or self.me_address is None:
            raise ChannelFailure("local ME channel not established")
        try:
            self.sim.send(self.address, self.me_address,
                          self.channel.seal_frame(frame_type, inner))
        except UnknownEndpoint:
            raise ChannelFailure("migration enclave endpoint is gone") from None

    def _handle(self, env: Envelope) -> None:
        frame_type, body = parse_frame(env.payload)
        if frame_type == FRAME_LOCAL_ATTEST_OK:
            if self._handshake is None:
                self.sim.note(f"library {self.address.fmt()} unexpected attest reply")
                return
            self.channel = self._handshake.finish(body)
            self._handshake = None
            self.sim.note(f"library {self.address.fmt()} local channel up")
            return
        if self.channel is None:
            self.sim.note(f"library {self.address.fmt()} dropped frame 0x{frame_type:02x}: no channel")
            return
        frame_type, inner = self.channel.open_frame(env.payload)
        if frame_type == FRAME_INCOMING_DATA:
            try:
                self.receive_incoming(MigrationData.decode(inner))
            except SimError as exc:
                self.sim.note(f"library {self.address.fmt()} receive failed: "
                              f"{type(exc).__name__}")
                self._send_frame(FRAME_ERROR_LOCAL, bytes([error_code_for(exc)]))
                return
            self.sim.note(f"library {self.address.fmt()} installed incoming state")
            self._send_frame(FRAME_CONFIRM_LOCAL, b"")
        elif frame_type == FRAME_CONFIRM_LOCAL:
            self.migration_confirmed = True
            self.sim.note(f"library {self.address.fmt()} migration confirmed")
        elif frame_type == FRAME_ERROR_LOCAL:
            self.last_me_error = CODE_ERRORS.get(inner[0], f"code-{inner[0]}")
            self.sim.note(f"library {self.address.fmt()} ME error: {self.last_me_error}")
        else:
            self.sim.note(f"library {self.address.fmt()} ignoring frame 0x{frame_type:02x}")

    # -- audit hooks (used by the harness oracles, not by the protocol) --

    def secret_material(self) -> list[bytes]:
        """Byte strings that must never appear in adversary-recorded traffic."""
        secrets = []
        if self.internals.msk != b"\x00" * sgx.KEY_LEN:
            secrets.append(self.internals.msk)
        return secrets


def raise_error_by_name(name: str, message: str = "") -> None:
    cls = _ERROR_CLASSES.get(name, ChannelFailure)
    raise cls(message or name)
