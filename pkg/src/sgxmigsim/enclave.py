"""Migration enclave: per-machine service that moves enclave state.

One migration enclave (ME) runs in each machine's management VM. The
application enclave's library hands it frozen state over a local
attested channel; the ME then opens a mutually attested channel to the
destination machine's ME, proves both are the same ME build under the
same data-center operator, and ships the state. Records are kept until
the destination's library confirms installation, so a failed or refused
transfer can be retried without losing the only copy of the state.

Machine-to-machine wire format (length-prefixed frames, length(4 BE)
covering type byte + body):
  0x01 QUOTE_EXCHANGE   role(1) + quote(288) + ephemeral pub(32), cleartext
  0x02 TRANSCRIPT_SIG   AEAD: operator id + ME pub + certificate + signature
  0x03 MIGRATION_RECORD AEAD: source mrenclave(32) + migration data(1296)
  0x04 CONFIRM          AEAD: empty
  0x05 ERROR            AEAD: code(1)
AEAD frames carry an 8-byte big-endian sequence number at the start of
the encrypted payload; receivers accept only the exact next sequence.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from . import sgx
from .errors import (
    AlreadyProvisioned,
    AttestationFailure,
    BindingMismatch,
    ChannelFailure,
    MigrationBusy,
    NotProvisioned,
    OperatorMismatch,
    PeerIdentityMismatch,
    SimError,
    UnknownEndpoint,
)
from .library import (
    CODE_ERRORS,
    FRAME_CONFIRM_LOCAL,
    FRAME_ERROR_LOCAL,
    FRAME_INCOMING_DATA,
    FRAME_MIGRATE_REQUEST,
    MIGRATION_DATA_LEN,
    MigrationData,
    error_code_for,
)
from .netsim import (
    ADDRESS_LEN,
    FRAME_LOCAL_ATTEST,
    FRAME_LOCAL_ATTEST_OK,
    Address,
    AttestedChannel,
    Envelope,
    LocalHandshake,
    RemoteHandshake,
    Simulation,
    encode_frame,
    frame_type_of,
    parse_frame,
)

ME_ENDPOINT = 0  # the ME listens on endpoint 0 of every machine

FRAME_QUOTE_EXCHANGE = 0x01
FRAME_TRANSCRIPT_SIG = 0x02
FRAME_MIGRATION_RECORD = 0x03
FRAME_CONFIRM = 0x04
FRAME_ERROR = 0x05

ME_CODE = "migration-enclave"
RECORDS_KEY = "me/records"
RECORDS_AAD = b"me-records"


def me_identity() -> sgx.EnclaveIdentity:
    """Identity of the genuine ME build; identical on every machine."""
    return sgx.make_identity(ME_CODE)


# --- operator credentials -----------------------------------------------------

@dataclass
class OperatorCA:
    """Data-center operator's certifying authority (a test fixture)."""

    operator_id: str
    _key: ed25519.Ed25519PrivateKey

    @classmethod
    def generate(cls, operator_id: str, rng: random.Random) -> "OperatorCA":
        return cls(operator_id,
                   ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32)))

    @property
    def public_bytes(self) -> bytes:
        return self._key.public_key().public_bytes_raw()

    def issue(self, rng: random.Random) -> "DataCenterCredential":
        signing = ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        pub = signing.public_key().public_bytes_raw()
        cert = self._key.sign(b"me-credential|" + _id_block(self.operator_id, pub))
        return DataCenterCredential(operator_id=self.operator_id, signing_key=signing,
                                    certificate=cert, ca_public=self.public_bytes)


def _id_block(operator_id: str, pub: bytes) -> bytes:
    raw = operator_id.encode()
    return len(raw).to_bytes(2, "big") + raw + pub


@dataclass
class DataCenterCredential:
    """Operator-issued signing credential installed once per ME."""

    operator_id: str
    signing_key: ed25519.Ed25519PrivateKey
    certificate: bytes
    ca_public: bytes

    def sign_transcript(self, transcript: bytes) -> bytes:
        pub = self.signing_key.public_key().public_bytes_raw()
        sig = self.signing_key.sign(b"transcript|" + transcript)
        return _id_block(self.operator_id, pub) + self.certificate + sig

    def verify_peer(self, inner: bytes, transcript: bytes) -> str:
        """Check the peer's transcript signature and same-operator binding."""
        try:
            id_len = int.from_bytes(inner[:2], "big")
            peer_id = inner[2:2 + id_len].decode()
            off = 2 + id_len
            peer_pub = inner[off:off + 32]
            cert = inner[off + 32:off + 96]
            sig = inner[off + 96:off + 160]
            if len(sig) != 64:
                raise ValueError
        except (ValueError, UnicodeDecodeError):
            raise ChannelFailure("malformed transcript signature frame") from None
        ca = ed25519.Ed25519PublicKey.from_public_bytes(self.ca_public)
        try:
            ca.verify(cert, b"me-credential|" + _id_block(peer_id, peer_pub))
        except InvalidSignature:
            raise OperatorMismatch("peer credential not issued by our operator") from None
        if peer_id != self.operator_id:
            raise OperatorMismatch(f"peer operator {peer_id!r} != {self.operator_id!r}")
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(peer_pub).verify(
                sig, b"transcript|" + transcript)
        except InvalidSignature:
            raise AttestationFailure("transcript signature invalid") from None
        return peer_id


# --- records and sessions ------------------------------------------------------

class RecordState(Enum):
    PENDING_SEND = 1
    AWAITING_CONFIRM = 2
    BUFFERED_INCOMING = 3
    DELIVERED = 4


@dataclass
class MigrationRecord:
    """Retained copy of in-flight state, outbound or inbound."""

    source_mrenclave: bytes
    data: MigrationData
    destination: Address
    state: RecordState
    requester: Address | None = None   # local session that asked for the send
    last_error: str | None = None
    delivery_attempted: bool = False   # inbound at-most-once guard

    def encode(self) -> bytes:
        err = error_code_byte(self.last_error)
        requester = self.requester.encode() if self.requester else b"\x00" * ADDRESS_LEN
        return (bytes([self.state.value]) + self.source_mrenclave
                + self.destination.encode() + requester
                + bytes([err, 1 if self.delivery_attempted else 0])
                + self.data.encode())

    @classmethod
    def decode(cls, raw: bytes) -> "MigrationRecord":
        state = RecordState(raw[0])
        source = raw[1:33]
        destination = Address.decode(raw[33:43])
        requester_raw = raw[43:53]
        requester = None if requester_raw == b"\x00" * ADDRESS_LEN \
            else Address.decode(requester_raw)
        err = CODE_ERRORS.get(raw[53]) if raw[53] else None
        attempted = raw[54] == 1
        data = MigrationData.decode(raw[55:55 + MIGRATION_DATA_LEN])
        return cls(source_mrenclave=source, data=data, destination=destination,
                   state=state, requester=requester, last_error=err,
                   delivery_attempted=attempted)


RECORD_LEN = 55 + MIGRATION_DATA_LEN


def error_code_byte(name: str | None) -> int:
    if name is None:
        return 0
    from .library import ERROR_CODES
    return ERROR_CODES.get(name, ERROR_CODES["ChannelFailure"])


@dataclass
class SessionEntry:
    """Local attested session with an application enclave's library."""

    address: Address
    peer: sgx.EnclaveIdentity  # taken from the verified report, never self-declared
    channel: AttestedChannel


@dataclass
class PeerLink:
    """State of one machine-to-machine migration attempt."""

    address: Address
    initiator: bool
    handshake: RemoteHandshake | None = None
    channel: AttestedChannel | None = None
    transcript: bytes = b""
    peer_verified: bool = False   # their transcript signature checked out
    sig_sent: bool = False
    established: bool = False
    record: MigrationRecord | None = None   # outbound record (initiator side)
    inbound_source: bytes | None = None     # mrenclave whose confirm we relay


class MigrationEnclave:
    """Single-threaded ME state machine driven by the simulation loop."""

    def __init__(self, sim: Simulation, platform: sgx.PlatformState,
                 identity: sgx.EnclaveIdentity | None = None,
                 address: Address | None = None):
        self.sim = sim
        self.platform = platform
        self.identity = identity or me_identity()
        self.address = address or Address(platform.machine, ME_ENDPOINT)
        self.credential: DataCenterCredential | None = None
        self.sessions: dict[Address, SessionEntry] = {}
        self.links: dict[Address, PeerLink] = {}
        self.records: list[MigrationRecord] = []
        self.delivery_audit: list[tuple[bytes, bytes]] = []
        self.native_key = sgx.derive_seal_key(platform, self.identity, sgx.BY_MRENCLAVE)
        self.store = sim.management_store(platform.machine)
        self._load_records()
        sim.register_endpoint(self.address, self._handle)

    # -- provisioning and lifecycle --

    def setup(self, credential: DataCenterCredential) -> None:
        if self.credential is not None:
            raise AlreadyProvisioned("credential already installed")
        self.credential = credential
        self.sim.note(f"me {self.address.fmt()} provisioned for operator "
                      f"{credential.operator_id!r}")

    def crash(self) -> None:
        """Drop the instance; retained records survive in the sealed store."""
        self.sim.unregister_endpoint(self.address)
        self.sessions.clear()
        self.links.clear()
        self.sim.note(f"me {self.address.fmt()} crashed")

    # -- record persistence (sealed with the ME's native key) --

    def _persist_records(self) -> None:
        durable = [r for r in self.records if r.state is not RecordState.DELIVERED]
        body = len(durable).to_bytes(2, "big") + b"".join(r.encode() for r in durable)
        blob = sgx.seal(self.native_key, body, RECORDS_AAD, rng=self.platform.rng)
        self.store.put(RECORDS_KEY, blob.encode())

    def _load_records(self) -> None:
        raw = self.store.get(RECORDS_KEY)
        if raw is None:
            return
        blob = sgx.SealedBlob.decode(raw)
        body, _ = sgx.unseal(self.native_key, blob)
        count = int.from_bytes(body[:2], "big")
        self.records = [
            MigrationRecord.decode(body[2 + i * RECORD_LEN: 2 + (i + 1) * RECORD_LEN])
            for i in range(count)
        ]

    # -- queries used by the harness --

    def outbound_record(self, source_mrenclave: bytes) -> MigrationRecord | None:
        for rec in self.records:
            if rec.source_mrenclave == source_mrenclave and rec.state in (
                    RecordState.PENDING_SEND, RecordState.AWAITING_CONFIRM):
                return rec
        return None

    def buffered_incoming(self, source_mrenclave: bytes | None = None,
                          ) -> list[MigrationRecord]:
        return [rec for rec in self.records
                if rec.state is RecordState.BUFFERED_INCOMING
                and (source_mrenclave is None
                     or rec.source_mrenclave == source_mrenclave)]

    # -- message dispatch --

    def _handle(self, env: Envelope) -> None:
        frame_type = frame_type_of(env.payload)
        try:
            if frame_type == FRAME_LOCAL_ATTEST:
                _, body = parse_frame(env.payload)
                self.on_local_attest(body, env.src)
            elif frame_type == FRAME_QUOTE_EXCHANGE:
                _, body = parse_frame(env.payload)
                self._on_quote_exchange(body, env.src)
            elif frame_type in (FRAME_TRANSCRIPT_SIG, FRAME_MIGRATION_RECORD,
                                FRAME_CONFIRM, FRAME_ERROR):
                self._on_remote_frame(env)
            elif frame_type in (FRAME_MIGRATE_REQUEST, FRAME_CONFIRM_LOCAL,
                                FRAME_ERROR_LOCAL):
                self._on_session_frame(env)
            else:
                self.sim.note(f"me {self.address.fmt()} dropped unknown frame "
                              f"type={frame_type}")
        except SimError as exc:
            # malformed, replayed or unverifiable input never crashes the ME
            self.sim.note(f"me {self.address.fmt()} rejected frame from "
                          f"{env.src.fmt()}: {type(exc).__name__}")

    # -- local sessions --

    def on_local_attest(self, msg: bytes, reply_to: Address) -> SessionEntry:
        """Admit a local enclave: verify its report, record its measured
        identity, finish the key agreement, then deliver any buffered state."""
        if reply_to in self.sessions:
            self.sim.note(f"me {self.address.fmt()} ignoring duplicate attest "
                          f"from {reply_to.fmt()}")
            return self.sessions[reply_to]
        channel, resp = LocalHandshake.respond(self.platform, self.identity, msg,
                                               self.platform.rng)
        entry = SessionEntry(address=reply_to, peer=channel.peer, channel=channel)
        self.sessions[reply_to] = entry
        self._send_raw(reply_to, encode_frame(FRAME_LOCAL_ATTEST_OK, resp))
        self.sim.note(f"me {self.address.fmt()} session up with "
                      f"{channel.peer.mrenclave.hex()[:12]} at {reply_to.fmt()}")
        self._deliver_buffered(entry)
        return entry

    def _deliver_buffered(self, session: SessionEntry) -> None:
        for rec in self.records:
            if (rec.state is RecordState.BUFFERED_INCOMING
                    and not rec.delivery_attempted
                    and rec.source_mrenclave == session.peer.mrenclave):
                rec.delivery_attempted = True
                self._persist_records()
                self._send_session(session, FRAME_INCOMING_DATA, rec.data.encode())
                self.delivery_audit.append((rec.source_mrenclave,
                                            session.peer.mrenclave))
                self.sim.note(f"me {self.address.fmt()} delivering buffered state "
                              f"for {rec.source_mrenclave.hex()[:12]}")
                return

    def _on_session_frame(self, env: Envelope) -> None:
        session = self.sessions.get(env.src)
        if session is None:
            self.sim.note(f"me {self.address.fmt()} no session for {env.src.fmt()}")
            return
        frame_type, inner = session.channel.open_frame(env.payload)
        if frame_type == FRAME_MIGRATE_REQUEST:
            if len(inner) != ADDRESS_LEN + MIGRATION_DATA_LEN:
                raise ChannelFailure("malformed migrate request")
            destination = Address.decode(inner[:ADDRESS_LEN])
            data = MigrationData.decode(inner[ADDRESS_LEN:])
            try:
                self.migrate_out(session.peer.mrenclave, data, destination,
                                 requester=session.address)
            except SimError as exc:
                self._send_session(session, FRAME_ERROR_LOCAL,
                                   bytes([error_code_for(exc)]))
        elif frame_type == FRAME_CONFIRM_LOCAL:
            self._on_library_confirm(session)
        elif frame_type == FRAME_ERROR_LOCAL:
            self._on_library_error(session, inner)
        else:
            self.sim.note(f"me {self.address.fmt()} unexpected session frame "
                          f"0x{frame_type:02x}")

    # -- outbound migration --

    def migrate_out(self, source_mrenclave: bytes, data: MigrationData,
                    destination: Address, requester: Address | None = None,
                    ) -> MigrationRecord:
        """Create a retained record and start the transfer protocol."""
        if self.outbound_record(source_mrenclave) is not None:
            raise MigrationBusy("a migration for this enclave is already outstanding")
        record = MigrationRecord(source_mrenclave=source_mrenclave, data=data,
                                 destination=destination,
                                 state=RecordState.PENDING_SEND, requester=requester)
        self.records.append(record)
        self._persist_records()
        self.sim.note(f"me {self.address.fmt()} recorded outbound migration for "
                      f"{source_mrenclave.hex()[:12]} -> machine {destination.machine}")
        self._attempt_send(record, destination)
        return record

    def retry(self, source_mrenclave: bytes, destination: Address | None = None,
              ) -> MigrationRecord:
        """Re-attempt a retained outbound record, optionally to a new machine."""
        record = self.outbound_record(source_mrenclave)
        if record is None:
            raise ChannelFailure("no retained record for this enclave")
        if destination is not None:
            record.destination = destination
        record.state = RecordState.PENDING_SEND
        record.last_error = None
        self._persist_records()
        self._attempt_send(record, record.destination)
        return record

    def _attempt_send(self, record: MigrationRecord, destination: Address) -> None:
        if self.credential is None:
            self._fail_outbound(record, NotProvisioned("no credential installed"))
            return
        if destination in self.links:
            self._fail_outbound(record, ChannelFailure(
                "another attempt to this destination is in flight"))
            return
        handshake, msg = RemoteHandshake.initiate(self.platform, self.identity,
                                                  self.platform.rng)
        link = PeerLink(address=destination, initiator=True, handshake=handshake,
                        record=record)
        self.links[destination] = link
        try:
            self._send_raw(destination,
                           encode_frame(FRAME_QUOTE_EXCHANGE, bytes([0]) + msg))
        except UnknownEndpoint:
            del self.links[destination]
            self._fail_outbound(record, ChannelFailure(
                f"no migration enclave at {destination.fmt()}"))

    def _fail_outbound(self, record: MigrationRecord, exc: SimError) -> None:
        record.state = RecordState.PENDING_SEND
        record.last_error = type(exc).__name__
        self._persist_records()
        self.sim.note(f"me {self.address.fmt()} migration for "
                      f"{record.source_mrenclave.hex()[:12]} failed: "
                      f"{record.last_error}; record retained")
        if record.requester is not None:
            session = self.sessions.get(record.requester)
            if session is not None:
                self._send_session(session, FRAME_ERROR_LOCAL,
                                   bytes([error_code_for(exc)]))

    # -- machine-to-machine protocol --

    def _on_quote_exchange(self, body: bytes, src: Address) -> None:
        if len(body) < 1:
            raise ChannelFailure("empty quote exchange")
        role, msg = body[0], body[1:]
        if role == 0:
            self._respond_quote(msg, src)
        else:
            self._finish_quote(msg, src)

    def _accept_peer(self, peer: sgx.EnclaveIdentity) -> bool:
        """A genuine ME only ever talks to an ME with its own measurement."""
        return peer.mrenclave == self.identity.mrenclave

    def _respond_quote(self, msg: bytes, src: Address) -> None:
        """Destination side: answer a migration request's first message."""
        if self.credential is None:
            self.sim.note(f"me {self.address.fmt()} not provisioned; "
                          f"ignoring quote from {src.fmt()}")
            return
        if src in self.links:
            self.sim.note(f"me {self.address.fmt()} ignoring duplicate quote "
                          f"exchange from {src.fmt()}")
            return
        channel, peer, resp, transcript = RemoteHandshake.respond(
            self.platform, self.identity, self.sim.root.public_bytes, msg,
            self.platform.rng)
        if not self._accept_peer(peer):
            self.sim.note(f"me {self.address.fmt()} peer at {src.fmt()} is not a "
                          f"genuine ME; refusing")
            return
        link = PeerLink(address=src, initiator=False, channel=channel,
                        transcript=transcript)
        self.links[src] = link
        self._send_raw(src, encode_frame(FRAME_QUOTE_EXCHANGE, bytes([1]) + resp))
        self._send_link(link, FRAME_TRANSCRIPT_SIG,
                        self.credential.sign_transcript(transcript))
        link.sig_sent = True

    def _finish_quote(self, msg: bytes, src: Address) -> None:
        """Source side: the destination answered; check it is a genuine ME."""
        link = self.links.get(src)
        if link is None or not link.initiator or link.handshake is None:
            self.sim.note(f"me {self.address.fmt()} stray quote response from "
                          f"{src.fmt()}")
            return
        record = link.record
        try:
            channel, peer, transcript = link.handshake.finish(
                self.sim.root.public_bytes, msg)
        except SimError as exc:
            del self.links[src]
            if record is not None:
                self._fail_outbound(record, AttestationFailure(str(exc)))
            return
        if not self._accept_peer(peer):
            del self.links[src]
            if record is not None:
                self._fail_outbound(record, PeerIdentityMismatch(
                    "destination is not a genuine migration enclave"))
            return
        link.handshake = None
        link.channel = channel
        link.transcript = transcript
        assert self.credential is not None
        self._send_link(link, FRAME_TRANSCRIPT_SIG,
                        self.credential.sign_transcript(transcript))
        link.sig_sent = True

    def _on_remote_frame(self, env: Envelope) -> None:
        link = self.links.get(env.src)
        if link is None or link.channel is None:
            self.sim.note(f"me {self.address.fmt()} no link for {env.src.fmt()}")
            return
        frame_type, inner = link.channel.open_frame(env.payload)
        if frame_type == FRAME_TRANSCRIPT_SIG:
            self._on_transcript_sig(link, inner)
        elif frame_type == FRAME_MIGRATION_RECORD:
            self._on_migration_record(link, inner)
        elif frame_type == FRAME_CONFIRM:
            self._on_remote_confirm(link)
        elif frame_type == FRAME_ERROR:
            self._on_remote_error(link, inner)
        else:
            self.sim.note(f"me {self.address.fmt()} unexpected remote frame "
                          f"0x{frame_type:02x}")

    def _on_transcript_sig(self, link: PeerLink, inner: bytes) -> None:
        assert self.credential is not None
        try:
            self.credential.verify_peer(inner, link.transcript)
        except SimError as exc:
            del self.links[link.address]
            self.sim.note(f"me {self.address.fmt()} transcript check failed for "
                          f"{link.address.fmt()}: {type(exc).__name__}")
            if link.initiator and link.record is not None:
                self._fail_outbound(link.record, exc)
            return
        link.peer_verified = True
        link.established = link.sig_sent and link.peer_verified
        self.sim.note(f"me {self.address.fmt()} operator check passed for "
                      f"{link.address.fmt()}")
        if link.initiator and link.record is not None and link.established:
            record = link.record
            inner_out = record.source_mrenclave + record.data.encode()
            self._send_link(link, FRAME_MIGRATION_RECORD, inner_out)
            record.state = RecordState.AWAITING_CONFIRM
            self._persist_records()

    def _on_migration_record(self, link: PeerLink, inner: bytes) -> None:
        if not link.established:
            self.sim.note(f"me {self.address.fmt()} record frame before operator "
                          f"check from {link.address.fmt()}")
            return
        if len(inner) != sgx.DIGEST_LEN + MIGRATION_DATA_LEN:
            raise ChannelFailure("malformed migration record frame")
        source = inner[:sgx.DIGEST_LEN]
        data = MigrationData.decode(inner[sgx.DIGEST_LEN:])
        self.on_incoming(source, data, link)

    def on_incoming(self, source_mrenclave: bytes, data: MigrationData,
                    link: PeerLink) -> None:
        """Deliver arriving state to a matching attested enclave, or buffer it."""
        # an identical retry replaces any undelivered buffered copy
        self.records = [rec for rec in self.records
                        if not (rec.state is RecordState.BUFFERED_INCOMING
                                and not rec.delivery_attempted
                                and rec.source_mrenclave == source_mrenclave)]
        record = MigrationRecord(source_mrenclave=source_mrenclave, data=data,
                                 destination=self.address,
                                 state=RecordState.BUFFERED_INCOMING)
        self.records.append(record)
        link.inbound_source = source_mrenclave
        # an old session whose enclave is gone must not swallow the delivery
        for addr in [a for a in self.sessions if not self.sim.has_endpoint(a)]:
            del self.sessions[addr]
        session = next((s for s in self.sessions.values()
                        if s.peer.mrenclave == source_mrenclave), None)
        if session is None:
            self._persist_records()
            self.sim.note(f"me {self.address.fmt()} buffered incoming state for "
                          f"{source_mrenclave.hex()[:12]}")
            return
        record.delivery_attempted = True
        self._persist_records()
        self.delivery_audit.append((source_mrenclave, session.peer.mrenclave))
        self.sim.note(f"me {self.address.fmt()} forwarding incoming state to "
                      f"{session.address.fmt()}")
        self._send_session(session, FRAME_INCOMING_DATA, data.encode())

    def _on_library_confirm(self, session: SessionEntry) -> None:
        """Destination library installed the state; finish both sides."""
        record = next((r for r in self.records
                       if r.state is RecordState.BUFFERED_INCOMING
                       and r.delivery_attempted
                       and r.source_mrenclave == session.peer.mrenclave), None)
        if record is None:
            self.sim.note(f"me {self.address.fmt()} confirm without matching record")
            return
        record.state = RecordState.DELIVERED
        self.records.remove(record)
        self._persist_records()
        self.sim.note(f"me {self.address.fmt()} incoming state for "
                      f"{record.source_mrenclave.hex()[:12]} delivered")
        link = next((l for l in self.links.values()
                     if l.inbound_source == record.source_mrenclave), None)
        if link is not None and link.channel is not None:
            self._send_link(link, FRAME_CONFIRM, b"")
            del self.links[link.address]

    def _on_library_error(self, session: SessionEntry, inner: bytes) -> None:
        """Destination library refused the state; pass the refusal upstream."""
        code = inner[0] if inner else 0
        name = CODE_ERRORS.get(code, f"code-{code}")
        self.sim.note(f"me {self.address.fmt()} library at {session.address.fmt()} "
                      f"refused incoming state: {name}")
        record = next((r for r in self.records
                       if r.state is RecordState.BUFFERED_INCOMING
                       and r.delivery_attempted
                       and r.source_mrenclave == session.peer.mrenclave), None)
        if record is None:
            return
        self.records.remove(record)
        self._persist_records()
        link = next((l for l in self.links.values()
                     if l.inbound_source == record.source_mrenclave), None)
        if link is not None and link.channel is not None:
            self._send_link(link, FRAME_ERROR, bytes([code]))
            del self.links[link.address]

    def _on_remote_confirm(self, link: PeerLink) -> None:
        record = link.record
        if not link.initiator or record is None:
            return
        record.state = RecordState.DELIVERED
        if record in self.records:
            self.records.remove(record)
        self._persist_records()
        del self.links[link.address]
        self.sim.note(f"me {self.address.fmt()} migration for "
                      f"{record.source_mrenclave.hex()[:12]} confirmed; record deleted")
        if record.requester is not None:
            session = self.sessions.get(record.requester)
            if session is not None:
                self._send_session(session, FRAME_CONFIRM_LOCAL, b"")

    def _on_remote_error(self, link: PeerLink, inner: bytes) -> None:
        record = link.record
        del self.links[link.address]
        if not link.initiator or record is None:
            return
        code = inner[0] if inner else 0
        name = CODE_ERRORS.get(code, f"code-{code}")
        from .library import raise_error_by_name
        try:
            raise_error_by_name(name, f"destination reported {name}")
        except SimError as exc:
            self._fail_outbound(record, exc)

    # -- send helpers --

    def _send_raw(self, dst: Address, frame: bytes) -> None:
        self.sim.send(self.address, dst, frame)

    def _send_link(self, link: PeerLink, frame_type: int, inner: bytes) -> None:
        assert link.channel is not None
        try:
            self._send_raw(link.address, link.channel.seal_frame(frame_type, inner))
        except UnknownEndpoint:
            self.sim.note(f"me {self.address.fmt()} link endpoint "
                          f"{link.address.fmt()} is gone")

    def _send_session(self, session: SessionEntry, frame_type: int,
                      inner: bytes) -> None:
        try:
            self._send_raw(session.address,
                           session.channel.seal_frame(frame_type, inner))
        except UnknownEndpoint:
            self.sim.note(f"me {self.address.fmt()} session endpoint "
                          f"{session.address.fmt()} is gone")
