"""Deterministic discrete-event network and host simulation.

Machines, VM-local key-value stores, message transport with an in-path
adversary, and mutually attested secure channels. Every byte of
randomness in a run flows from the single seed given to Simulation, so
two runs with the same scenario, adversary policy and seed produce
byte-identical event logs.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import sgx
from .errors import (
    AttestationFailure,
    AuthFailure,
    BindingMismatch,
    ChannelFailure,
    ManagementVmImmovable,
    ReplayError,
    StoreLocality,
    UnknownEndpoint,
)

# frame types used during channel establishment (pre-channel, cleartext)
FRAME_LOCAL_ATTEST = 0x0E
FRAME_LOCAL_ATTEST_OK = 0x0F


class Address(NamedTuple):
    """Network address of an endpoint: (machine id, endpoint number)."""

    machine: int
    endpoint: int

    def encode(self) -> bytes:
        return self.machine.to_bytes(8, "big") + self.endpoint.to_bytes(2, "big")

    @classmethod
    def decode(cls, raw: bytes) -> "Address":
        return cls(int.from_bytes(raw[:8], "big"), int.from_bytes(raw[8:10], "big"))

    def fmt(self) -> str:
        return f"{self.machine}:{self.endpoint}"


ADDRESS_LEN = 10


def encode_frame(frame_type: int, body: bytes) -> bytes:
    """Length-prefixed frame: length(4, big-endian) covers type byte + body."""
    return (1 + len(body)).to_bytes(4, "big") + bytes([frame_type]) + body


def parse_frame(raw: bytes) -> tuple[int, bytes]:
    if len(raw) < 5:
        raise ChannelFailure("short frame")
    length = int.from_bytes(raw[:4], "big")
    if length != len(raw) - 4 or length < 1:
        raise ChannelFailure("frame length mismatch")
    return raw[4], raw[5:]


def frame_type_of(raw: bytes) -> int | None:
    """Peek at a frame's type byte without validating the rest."""
    return raw[4] if len(raw) >= 5 else None


@dataclass
class Envelope:
    uid: int
    src: Address
    dst: Address
    payload: bytes


# --- adversary --------------------------------------------------------------

@dataclass
class AdversaryRule:
    """One rule of the in-path adversary.

    action: deliver | drop | duplicate | delay | inject | record.
    Match fields that are None match anything. `record` and `inject` do not
    consume the envelope; the first matching terminal action decides its fate.
    """

    action: str
    from_machine: int | None = None
    from_endpoint: int | None = None
    to_machine: int | None = None
    to_endpoint: int | None = None
    frame_type: int | None = None
    times: int = 1            # extra copies for duplicate
    ticks: int = 1            # delay amount
    payload: bytes = b""      # injected payload
    inject_src: Address | None = None
    inject_dst: Address | None = None
    max_matches: int | None = None
    matched: int = 0

    def matches(self, env: Envelope) -> bool:
        if self.max_matches is not None and self.matched >= self.max_matches:
            return False
        if self.from_machine is not None and env.src.machine != self.from_machine:
            return False
        if self.from_endpoint is not None and env.src.endpoint != self.from_endpoint:
            return False
        if self.to_machine is not None and env.dst.machine != self.to_machine:
            return False
        if self.to_endpoint is not None and env.dst.endpoint != self.to_endpoint:
            return False
        if self.frame_type is not None and frame_type_of(env.payload) != self.frame_type:
            return False
        return True


@dataclass
class AdversaryPolicy:
    rules: list[AdversaryRule] = field(default_factory=list)
    recorded: list[tuple[int, Address, Address, bytes]] = field(default_factory=list)

    def recorded_payloads(self) -> list[bytes]:
        return [payload for _, _, _, payload in self.recorded]


# --- VM stores ----------------------------------------------------------------

@dataclass
class VmStore:
    """Untrusted per-VM key-value store; moves between machines with its VM."""

    vm_id: str
    management: bool = False
    data: dict[str, bytes] = field(default_factory=dict)

    def put(self, key: str, value: bytes) -> None:
        self.data[key] = bytes(value)

    def get(self, key: str) -> bytes | None:
        return self.data.get(key)

    def delete(self, key: str) -> None:
        self.data.pop(key, None)


def save_store(store: VmStore, path: str) -> None:
    """Write a store to disk: entry count(4), then per entry
    key_len(2) + key + value_len(4) + value, all big-endian, sorted by key."""
    items = sorted(store.data.items())
    out = [len(items).to_bytes(4, "big")]
    for key, value in items:
        kb = key.encode()
        out.append(len(kb).to_bytes(2, "big"))
        out.append(kb)
        out.append(len(value).to_bytes(4, "big"))
        out.append(value)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_store(path: str, vm_id: str = "", management: bool = False) -> VmStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    count = int.from_bytes(raw[:4], "big")
    off = 4
    data: dict[str, bytes] = {}
    for _ in range(count):
        klen = int.from_bytes(raw[off:off + 2], "big")
        off += 2
        key = raw[off:off + klen].decode()
        off += klen
        vlen = int.from_bytes(raw[off:off + 4], "big")
        off += 4
        data[key] = raw[off:off + vlen]
        off += vlen
    if off != len(raw):
        raise ValueError("trailing bytes in store file")
    return VmStore(vm_id=vm_id, management=management, data=data)


# --- attested channels ----------------------------------------------------------

def _sha512(data: bytes) -> bytes:
    return hashlib.sha512(data).digest()


def _channel_keys(shared: bytes, initiator: sgx.EnclaveIdentity,
                  responder: sgx.EnclaveIdentity, context: bytes) -> tuple[bytes, bytes]:
    """Derive the two directional keys from the DH secret and both identities."""
    info = b"attested-channel|" + context + b"|" + initiator.encode() + responder.encode()
    out = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(shared)
    return out[:16], out[16:]


@dataclass
class AttestedChannel:
    """One endpoint of a mutually attested channel.

    Directional AEAD keys plus send/receive sequence counters. Frames use
    nonce = seq, carry the sequence inside the AEAD payload, and a receiver
    accepts only the exact next sequence number, so replays and reorders
    fail the authentication-or-sequence check.
    """

    send_key: bytes
    recv_key: bytes
    peer: sgx.EnclaveIdentity
    send_seq: int = 0
    recv_seq: int = 0

    def seal_frame(self, frame_type: int, inner: bytes) -> bytes:
        seq = self.send_seq
        nonce = b"\x00" * 4 + seq.to_bytes(8, "big")
        plaintext = seq.to_bytes(8, "big") + inner
        ct = AESGCM(self.send_key).encrypt(nonce, plaintext, bytes([frame_type]))
        self.send_seq += 1
        return encode_frame(frame_type, nonce + ct)

    def open_frame(self, raw: bytes) -> tuple[int, bytes]:
        frame_type, body = parse_frame(raw)
        if len(body) < sgx.NONCE_LEN + 8 + sgx.TAG_LEN:
            raise ChannelFailure("short channel frame")
        nonce, ct = body[:sgx.NONCE_LEN], body[sgx.NONCE_LEN:]
        claimed = int.from_bytes(nonce[4:], "big")
        if claimed != self.recv_seq:
            raise ReplayError(f"expected seq {self.recv_seq}, frame carries {claimed}")
        try:
            plaintext = AESGCM(self.recv_key).decrypt(nonce, ct, bytes([frame_type]))
        except InvalidTag:
            raise AuthFailure("channel frame failed authentication") from None
        if int.from_bytes(plaintext[:8], "big") != claimed:
            raise AuthFailure("sequence number mismatch inside frame")
        self.recv_seq += 1
        return frame_type, plaintext[8:]


def _new_x25519(rng: random.Random) -> tuple[x25519.X25519PrivateKey, bytes]:
    priv = x25519.X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    return priv, priv.public_key().public_bytes_raw()


@dataclass
class LocalHandshake:
    """Two-message local-attestation key agreement on one machine.

    Each side's ephemeral public key is bound into its report's user data,
    so substituting the key-agreement message breaks the binding.
    """

    platform: sgx.PlatformState
    my_identity: sgx.EnclaveIdentity
    peer_identity: sgx.EnclaveIdentity
    eph_priv: x25519.X25519PrivateKey
    eph_pub: bytes

    @classmethod
    def initiate(cls, platform: sgx.PlatformState, my_identity: sgx.EnclaveIdentity,
                 peer_identity: sgx.EnclaveIdentity,
                 rng: random.Random) -> tuple["LocalHandshake", bytes]:
        priv, pub = _new_x25519(rng)
        report = sgx.local_attest(platform, my_identity, peer_identity, _sha512(pub))
        state = cls(platform, my_identity, peer_identity, priv, pub)
        return state, report.encode() + pub

    @staticmethod
    def parse_msg(msg: bytes) -> tuple[sgx.Report, bytes]:
        if len(msg) != sgx.REPORT_LEN + 32:
            raise ChannelFailure("malformed local-attest message")
        return sgx.Report.decode(msg[:sgx.REPORT_LEN]), msg[sgx.REPORT_LEN:]

    @staticmethod
    def respond(platform: sgx.PlatformState, my_identity: sgx.EnclaveIdentity,
                msg: bytes, rng: random.Random) -> tuple[AttestedChannel, bytes]:
        report, their_pub = LocalHandshake.parse_msg(msg)
        if not sgx.verify_report(platform, my_identity, report):
            raise AttestationFailure("initiator report invalid")
        if report.report_data != _sha512(their_pub):
            raise BindingMismatch("key-agreement message not bound in report")
        priv, pub = _new_x25519(rng)
        my_report = sgx.local_attest(platform, my_identity, report.prover, _sha512(pub))
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(their_pub))
        k_ir, k_ri = _channel_keys(shared, report.prover, my_identity, b"local")
        channel = AttestedChannel(send_key=k_ri, recv_key=k_ir, peer=report.prover)
        return channel, my_report.encode() + pub

    def finish(self, resp: bytes) -> AttestedChannel:
        report, their_pub = LocalHandshake.parse_msg(resp)
        if not sgx.verify_report(self.platform, self.my_identity, report):
            raise AttestationFailure("responder report invalid")
        if report.prover != self.peer_identity:
            raise AttestationFailure("responder is not the expected enclave")
        if report.report_data != _sha512(their_pub):
            raise BindingMismatch("key-agreement message not bound in report")
        shared = self.eph_priv.exchange(x25519.X25519PublicKey.from_public_bytes(their_pub))
        k_ir, k_ri = _channel_keys(shared, self.my_identity, self.peer_identity, b"local")
        return AttestedChannel(send_key=k_ir, recv_key=k_ri, peer=self.peer_identity)


def establish_local_channel(platform: sgx.PlatformState,
                            enclave_a: sgx.EnclaveIdentity,
                            enclave_b: sgx.EnclaveIdentity,
                            rng: random.Random) -> tuple[AttestedChannel, AttestedChannel]:
    """Run the local handshake in-process; returns (a-side, b-side) channels."""
    state, msg = LocalHandshake.initiate(platform, enclave_a, enclave_b, rng)
    chan_b, resp = LocalHandshake.respond(platform, enclave_b, msg, rng)
    chan_a = state.finish(resp)
    return chan_a, chan_b


@dataclass
class RemoteHandshake:
    """Quote-based key agreement between enclaves on different machines."""

    platform: sgx.PlatformState
    my_identity: sgx.EnclaveIdentity
    eph_priv: x25519.X25519PrivateKey
    eph_pub: bytes
    my_msg: bytes

    @classmethod
    def initiate(cls, platform: sgx.PlatformState, my_identity: sgx.EnclaveIdentity,
                 rng: random.Random) -> tuple["RemoteHandshake", bytes]:
        priv, pub = _new_x25519(rng)
        quote = sgx.get_quote(platform, my_identity, _sha512(pub))
        msg = quote.encode() + pub
        return cls(platform, my_identity, priv, pub, msg), msg

    @staticmethod
    def parse_msg(msg: bytes) -> tuple[sgx.Quote, bytes]:
        if len(msg) != sgx.QUOTE_LEN + 32:
            raise ChannelFailure("malformed quote-exchange message")
        return sgx.Quote.decode(msg[:sgx.QUOTE_LEN]), msg[sgx.QUOTE_LEN:]

    @staticmethod
    def respond(platform: sgx.PlatformState, my_identity: sgx.EnclaveIdentity,
                root_public: bytes, msg: bytes, rng: random.Random,
                ) -> tuple[AttestedChannel, sgx.EnclaveIdentity, bytes, bytes]:
        """Returns (channel, initiator identity, response message, transcript)."""
        quote, their_pub = RemoteHandshake.parse_msg(msg)
        peer = sgx.verify_quote(root_public, quote)
        if quote.report_data != _sha512(their_pub):
            raise BindingMismatch("key-agreement message not bound in quote")
        priv, pub = _new_x25519(rng)
        my_quote = sgx.get_quote(platform, my_identity, _sha512(pub))
        resp = my_quote.encode() + pub
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(their_pub))
        k_ir, k_ri = _channel_keys(shared, peer, my_identity, b"remote")
        channel = AttestedChannel(send_key=k_ri, recv_key=k_ir, peer=peer)
        transcript = msg + resp
        return channel, peer, resp, transcript

    def finish(self, root_public: bytes, resp: bytes,
               ) -> tuple[AttestedChannel, sgx.EnclaveIdentity, bytes]:
        """Returns (channel, responder identity, transcript)."""
        quote, their_pub = RemoteHandshake.parse_msg(resp)
        peer = sgx.verify_quote(root_public, quote)
        if quote.report_data != _sha512(their_pub):
            raise BindingMismatch("key-agreement message not bound in quote")
        shared = self.eph_priv.exchange(x25519.X25519PublicKey.from_public_bytes(their_pub))
        k_ir, k_ri = _channel_keys(shared, self.my_identity, peer, b"remote")
        channel = AttestedChannel(send_key=k_ir, recv_key=k_ri, peer=peer)
        transcript = self.my_msg + resp
        return channel, peer, transcript


def establish_remote_channel(platform_a: sgx.PlatformState, enclave_a: sgx.EnclaveIdentity,
                             platform_b: sgx.PlatformState, enclave_b: sgx.EnclaveIdentity,
                             root_public: bytes, rng: random.Random,
                             ) -> tuple[AttestedChannel, AttestedChannel]:
    """Run the quote-based handshake in-process; callers still compare the
    peer identities recorded on the channels before trusting them."""
    state, msg = RemoteHandshake.initiate(platform_a, enclave_a, rng)
    chan_b, _, resp, _ = RemoteHandshake.respond(platform_b, enclave_b, root_public, msg, rng)
    chan_a, _, _ = state.finish(root_public, resp)
    return chan_a, chan_b


# --- the simulation -------------------------------------------------------------

Handler = Callable[[Envelope], None]


class Simulation:
    """Discrete-event simulation of machines, VMs, transport and adversary."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = random.Random(seed)
        self.root = sgx.AttestationRoot.generate(self.rng)
        self.machines: dict[int, sgx.PlatformState] = {}
        self.endpoints: dict[Address, Handler] = {}
        self.adversary = AdversaryPolicy()
        self.stores: dict[str, VmStore] = {}
        self.store_location: dict[str, int] = {}
        self.log: list[str] = []
        self.tick = 0
        self._next_machine = 1
        self._uid = 0
        self._queue: list[tuple[int, int, Envelope]] = []

    # -- machines and stores --

    def register_machine(self) -> tuple[int, sgx.PlatformState]:
        machine = self._next_machine
        self._next_machine += 1
        platform = sgx.new_platform(machine, self.root, self.rng)
        self.machines[machine] = platform
        mgmt = VmStore(vm_id=f"mgmt-{machine}", management=True)
        self.stores[mgmt.vm_id] = mgmt
        self.store_location[mgmt.vm_id] = machine
        self.note(f"machine {machine} registered")
        return machine, platform

    def management_store(self, machine: int) -> VmStore:
        return self.stores[f"mgmt-{machine}"]

    def add_vm(self, vm_id: str, machine: int) -> VmStore:
        if vm_id in self.stores:
            raise ValueError(f"vm {vm_id} already exists")
        store = VmStore(vm_id=vm_id)
        self.stores[vm_id] = store
        self.store_location[vm_id] = machine
        self.note(f"vm {vm_id} placed on machine {machine}")
        return store

    def vm_migrate_store(self, vm_id: str, to_machine: int) -> None:
        store = self.stores[vm_id]
        if store.management:
            raise ManagementVmImmovable(f"{vm_id} is a management VM")
        if to_machine not in self.machines:
            raise ValueError(f"unknown machine {to_machine}")
        src = self.store_location[vm_id]
        self.store_location[vm_id] = to_machine
        self.note(f"vm {vm_id} store moved {src} -> {to_machine}")

    def store(self, vm_id: str, machine: int) -> VmStore:
        """Access a VM store from a machine; enforces single-location residency."""
        where = self.store_location.get(vm_id)
        if where is None:
            raise StoreLocality(f"unknown vm {vm_id}")
        if where != machine:
            raise StoreLocality(f"vm {vm_id} lives on machine {where}, not {machine}")
        return self.stores[vm_id]

    # -- endpoints and transport --

    def register_endpoint(self, addr: Address, handler: Handler) -> None:
        if addr in self.endpoints:
            raise ValueError(f"endpoint {addr.fmt()} already registered")
        self.endpoints[addr] = handler

    def unregister_endpoint(self, addr: Address) -> None:
        self.endpoints.pop(addr, None)

    def has_endpoint(self, addr: Address) -> bool:
        return addr in self.endpoints

    def send(self, src: Address, dst: Address, payload: bytes) -> None:
        if dst not in self.endpoints:
            raise UnknownEndpoint(f"no endpoint at {dst.fmt()}")
        self._enqueue(self.tick + 1, Envelope(self._next_uid(), src, dst, payload))
        self.note(f"send {src.fmt()}->{dst.fmt()} type={_type_str(payload)} "
                  f"len={len(payload)} h={_digest8(payload)}")

    def _next_uid(self) -> int:
        self._uid += 1
        return self._uid

    def _enqueue(self, deliver_tick: int, env: Envelope) -> None:
        heapq.heappush(self._queue, (deliver_tick, env.uid, env))

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> int:
        """Advance one tick; adjudicate and deliver everything due."""
        self.tick += 1
        delivered = 0
        while self._queue and self._queue[0][0] <= self.tick:
            _, _, env = heapq.heappop(self._queue)
            delivered += self._process(env)
        return delivered

    def run(self, max_steps: int = 100_000) -> None:
        """Step until no messages remain in flight."""
        steps = 0
        while self._queue:
            self.step()
            steps += 1
            if steps > max_steps:
                raise RuntimeError("simulation did not quiesce")

    def _process(self, env: Envelope) -> int:
        verdict, extra = self._adjudicate(env)
        if verdict == "drop":
            self.note(f"adversary drop {env.src.fmt()}->{env.dst.fmt()} "
                      f"h={_digest8(env.payload)}")
            return 0
        if verdict == "delay":
            self.note(f"adversary delay {env.src.fmt()}->{env.dst.fmt()} "
                      f"ticks={extra} h={_digest8(env.payload)}")
            self._enqueue(self.tick + extra, Envelope(self._next_uid(), env.src,
                                                      env.dst, env.payload))
            return 0
        count = self._deliver(env)
        if verdict == "duplicate":
            for _ in range(extra):
                self.note(f"adversary duplicate {env.src.fmt()}->{env.dst.fmt()} "
                          f"h={_digest8(env.payload)}")
                copy = Envelope(self._next_uid(), env.src, env.dst, env.payload)
                count += self._deliver(copy)
        return count

    def _adjudicate(self, env: Envelope) -> tuple[str, int]:
        for rule in self.adversary.rules:
            if not rule.matches(env):
                continue
            rule.matched += 1
            if rule.action == "record":
                self.adversary.recorded.append((self.tick, env.src, env.dst, env.payload))
                self.note(f"adversary record {env.src.fmt()}->{env.dst.fmt()} "
                          f"h={_digest8(env.payload)}")
                continue
            if rule.action == "inject":
                dst = rule.inject_dst or env.dst
                src = rule.inject_src or env.src
                self.note(f"adversary inject ->{dst.fmt()} h={_digest8(rule.payload)}")
                self._enqueue(self.tick + 1, Envelope(self._next_uid(), src, dst,
                                                      rule.payload))
                continue
            if rule.action == "deliver":
                return "deliver", 0
            if rule.action == "drop":
                return "drop", 0
            if rule.action == "duplicate":
                return "duplicate", rule.times
            if rule.action == "delay":
                return "delay", rule.ticks
        return "deliver", 0

    def _deliver(self, env: Envelope) -> int:
        handler = self.endpoints.get(env.dst)
        if handler is None:
            self.note(f"dead-letter {env.src.fmt()}->{env.dst.fmt()} "
                      f"h={_digest8(env.payload)}")
            return 0
        self.note(f"deliver {env.src.fmt()}->{env.dst.fmt()} type={_type_str(env.payload)} "
                  f"len={len(env.payload)} h={_digest8(env.payload)}")
        from .errors import SimError
        try:
            handler(env)
        except SimError as exc:
            self.note(f"handler-error at {env.dst.fmt()}: {type(exc).__name__}")
        return 1

    # -- logging --

    def note(self, text: str) -> None:
        self.log.append(f"{self.tick:06d} {text}")

    def log_bytes(self) -> bytes:
        return ("\n".join(self.log) + "\n").encode()


def _digest8(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()[:12]


def _type_str(payload: bytes) -> str:
    t = frame_type_of(payload)
    return f"0x{t:02x}" if t is not None else "??"
