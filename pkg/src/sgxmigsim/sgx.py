"""Simulated SGX platform primitives.

Models the small slice of SGX that enclave migration depends on: sealing
keys derived from a per-machine CPU secret, AEAD sealing, hardware
monotonic counters addressed by UUID, local attestation reports, and
remote attestation quotes signed by a machine quoting key that is
certified by a simulation-wide attestation root.

All randomness is drawn from a caller-supplied ``random.Random`` so that
whole-simulation runs are reproducible from a single seed.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthFailure,
    CounterLimitExceeded,
    CounterNotFound,
    CounterOverflow,
    QuoteInvalid,
)

KEY_LEN = 16           # 128-bit seal keys
NONCE_LEN = 12         # 96-bit AEAD nonce
TAG_LEN = 16           # 128-bit AEAD tag
DIGEST_LEN = 32        # mrenclave / mrsigner
REPORT_DATA_LEN = 64   # user data bound into reports and quotes
COUNTER_NONCE_LEN = 8  # random half of a counter UUID
COUNTER_MAX = 2**32 - 1
COUNTER_LIMIT = 256    # live counters per enclave identity
MAC_LEN = 16

BY_MRENCLAVE = 1
BY_MRSIGNER = 2
_POLICY_LABEL = {BY_MRENCLAVE: b"mrenclave", BY_MRSIGNER: b"mrsigner"}


@dataclass(frozen=True)
class EnclaveIdentity:
    """Measured identity of an enclave: code digest plus signer digest."""

    mrenclave: bytes
    mrsigner: bytes

    def __post_init__(self) -> None:
        if len(self.mrenclave) != DIGEST_LEN or len(self.mrsigner) != DIGEST_LEN:
            raise ValueError("identity digests must be 32 bytes")

    def encode(self) -> bytes:
        return self.mrenclave + self.mrsigner


def make_identity(code: str, signer: str = "vendor") -> EnclaveIdentity:
    """Build an identity fixture from a code descriptor string."""
    return EnclaveIdentity(
        mrenclave=hashlib.sha256(b"enclave-code:" + code.encode()).digest(),
        mrsigner=hashlib.sha256(b"enclave-signer:" + signer.encode()).digest(),
    )


@dataclass(frozen=True)
class SealedBlob:
    """AEAD-sealed container; every field is covered by the tag."""

    policy: int
    nonce: bytes
    aad: bytes
    ciphertext: bytes
    tag: bytes

    def encode(self) -> bytes:
        """Stable byte layout: policy(1) nonce(12) aad_len(4) aad ct_len(4) ct tag(16)."""
        return b"".join([
            bytes([self.policy]),
            self.nonce,
            len(self.aad).to_bytes(4, "big"),
            self.aad,
            len(self.ciphertext).to_bytes(4, "big"),
            self.ciphertext,
            self.tag,
        ])

    @classmethod
    def decode(cls, raw: bytes) -> "SealedBlob":
        try:
            policy = raw[0]
            nonce = raw[1:1 + NONCE_LEN]
            off = 1 + NONCE_LEN
            aad_len = int.from_bytes(raw[off:off + 4], "big")
            off += 4
            aad = raw[off:off + aad_len]
            off += aad_len
            ct_len = int.from_bytes(raw[off:off + 4], "big")
            off += 4
            ciphertext = raw[off:off + ct_len]
            off += ct_len
            tag = raw[off:off + TAG_LEN]
            if len(nonce) != NONCE_LEN or len(aad) != aad_len \
                    or len(ciphertext) != ct_len or len(tag) != TAG_LEN \
                    or off + TAG_LEN != len(raw):
                raise ValueError
        except (IndexError, ValueError):
            raise AuthFailure("malformed sealed blob") from None
        return cls(policy, nonce, aad, ciphertext, tag)


@dataclass(frozen=True)
class CounterUuid:
    """Handle for a hardware counter: allocation id plus a random nonce."""

    counter_id: int
    nonce: bytes

    def encode(self) -> bytes:
        return self.counter_id.to_bytes(4, "big") + self.nonce

    @classmethod
    def decode(cls, raw: bytes) -> "CounterUuid":
        return cls(int.from_bytes(raw[:4], "big"), raw[4:12])


@dataclass
class CounterRecord:
    uuid: CounterUuid
    owner: bytes  # mrenclave of the creating enclave
    value: int = 0
    destroyed: bool = False


@dataclass(frozen=True)
class Report:
    """Local attestation report; MAC checks out only on the home machine."""

    prover: EnclaveIdentity
    target: EnclaveIdentity
    report_data: bytes
    mac: bytes

    def encode(self) -> bytes:
        return self.prover.encode() + self.target.encode() + self.report_data + self.mac

    @classmethod
    def decode(cls, raw: bytes) -> "Report":
        if len(raw) != 4 * DIGEST_LEN + REPORT_DATA_LEN + MAC_LEN:
            raise AuthFailure("malformed report")
        prover = EnclaveIdentity(raw[0:32], raw[32:64])
        target = EnclaveIdentity(raw[64:96], raw[96:128])
        return cls(prover, target, raw[128:192], raw[192:208])


@dataclass(frozen=True)
class Quote:
    """Remote attestation quote: machine quoting key signs the enclave identity
    and report data; the quoting key itself carries a root certification."""

    prover: EnclaveIdentity
    report_data: bytes
    quoting_pub: bytes
    quoting_cert: bytes  # root signature over the quoting public key
    signature: bytes

    def encode(self) -> bytes:
        return (self.prover.encode() + self.report_data
                + self.quoting_pub + self.quoting_cert + self.signature)

    @classmethod
    def decode(cls, raw: bytes) -> "Quote":
        if len(raw) != 2 * DIGEST_LEN + REPORT_DATA_LEN + 32 + 64 + 64:
            raise QuoteInvalid("malformed quote")
        prover = EnclaveIdentity(raw[0:32], raw[32:64])
        return cls(prover, raw[64:128], raw[128:160], raw[160:224], raw[224:288])


QUOTE_LEN = 2 * DIGEST_LEN + REPORT_DATA_LEN + 32 + 64 + 64
REPORT_LEN = 4 * DIGEST_LEN + REPORT_DATA_LEN + MAC_LEN


@dataclass
class AttestationRoot:
    """Simulation-wide trust anchor certifying machine quoting keys."""

    _key: ed25519.Ed25519PrivateKey

    @classmethod
    def generate(cls, rng: random.Random) -> "AttestationRoot":
        return cls(ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32)))

    @property
    def public_bytes(self) -> bytes:
        return self._key.public_key().public_bytes_raw()

    def certify(self, quoting_pub: bytes) -> bytes:
        return self._key.sign(b"quoting-key" + quoting_pub)


@dataclass
class PlatformState:
    """Per-machine hardware state.

    The CPU secret never leaves this object: it is not serialized into any
    message or file, only fed through the key-derivation PRF.
    """

    machine: int
    cpu_secret: bytes
    quoting_key: ed25519.Ed25519PrivateKey
    quoting_cert: bytes
    rng: random.Random
    counters: dict[CounterUuid, CounterRecord] = field(default_factory=dict)
    next_counter_id: int = 0
    op_counts: dict[str, int] = field(default_factory=dict)

    def _count(self, op: str) -> None:
        self.op_counts[op] = self.op_counts.get(op, 0) + 1

    def live_counters(self, owner: bytes) -> int:
        return sum(1 for rec in self.counters.values()
                   if rec.owner == owner and not rec.destroyed)


def new_platform(machine: int, root: AttestationRoot, rng: random.Random) -> PlatformState:
    """Provision a machine: fresh CPU secret, root-certified quoting key."""
    quoting_key = ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
    cert = root.certify(quoting_key.public_key().public_bytes_raw())
    return PlatformState(
        machine=machine,
        cpu_secret=rng.randbytes(KEY_LEN),
        quoting_key=quoting_key,
        quoting_cert=cert,
        rng=rng,
    )


# --- key derivation and sealing -------------------------------------------

def derive_seal_key(platform: PlatformState, identity: EnclaveIdentity,
                    policy: int = BY_MRENCLAVE) -> bytes:
    """Derive the 128-bit seal key for an identity under a binding policy.

    Keyed PRF over the CPU secret; BY_MRENCLAVE binds the code digest,
    BY_MRSIGNER binds only the signer digest, so same-signer enclaves share
    the BY_MRSIGNER key on one machine but never across machines.
    """
    if policy not in _POLICY_LABEL:
        raise ValueError(f"unknown seal policy {policy}")
    digest = identity.mrenclave if policy == BY_MRENCLAVE else identity.mrsigner
    mac = hmac.new(platform.cpu_secret,
                   b"seal-key|" + _POLICY_LABEL[policy] + b"|" + digest,
                   hashlib.sha256)
    return mac.digest()[:KEY_LEN]


def seal(key: bytes, plaintext: bytes, aad: bytes = b"", *,
         rng: random.Random | None = None, policy: int = BY_MRENCLAVE) -> SealedBlob:
    """AEAD-seal plaintext under a 128-bit key with a fresh 96-bit nonce."""
    if len(key) != KEY_LEN:
        raise ValueError("seal key must be 16 bytes")
    nonce = rng.randbytes(NONCE_LEN) if rng is not None else random.SystemRandom().randbytes(NONCE_LEN)
    # the policy byte is authenticated alongside the caller's aad
    full_aad = bytes([policy]) + aad
    ct = AESGCM(key).encrypt(nonce, plaintext, full_aad)
    return SealedBlob(policy=policy, nonce=nonce, aad=aad,
                      ciphertext=ct[:-TAG_LEN], tag=ct[-TAG_LEN:])


def unseal(key: bytes, blob: SealedBlob) -> tuple[bytes, bytes]:
    """Open a sealed blob; any modified bit in any field raises AuthFailure."""
    if len(key) != KEY_LEN:
        raise ValueError("seal key must be 16 bytes")
    full_aad = bytes([blob.policy]) + blob.aad
    try:
        plaintext = AESGCM(key).decrypt(blob.nonce, blob.ciphertext + blob.tag, full_aad)
    except InvalidTag:
        raise AuthFailure("unseal failed") from None
    return plaintext, blob.aad


# --- monotonic counters ----------------------------------------------------

def _lookup(platform: PlatformState, caller: EnclaveIdentity,
            uuid: CounterUuid) -> CounterRecord:
    rec = platform.counters.get(uuid)
    # unknown, destroyed and wrong-owner all collapse to the same error so a
    # counter's existence never leaks to another enclave
    if rec is None or rec.destroyed or rec.owner != caller.mrenclave:
        raise CounterNotFound("no such counter for this enclave")
    return rec


def mc_create(platform: PlatformState, caller: EnclaveIdentity) -> tuple[CounterUuid, int]:
    """Allocate a hardware counter at value 0; ids are never reused."""
    platform._count("mc_create")
    if platform.live_counters(caller.mrenclave) >= COUNTER_LIMIT:
        raise CounterLimitExceeded("enclave already holds 256 live counters")
    uuid = CounterUuid(platform.next_counter_id,
                       platform.rng.randbytes(COUNTER_NONCE_LEN))
    platform.next_counter_id += 1
    platform.counters[uuid] = CounterRecord(uuid=uuid, owner=caller.mrenclave)
    return uuid, 0


def mc_read(platform: PlatformState, caller: EnclaveIdentity, uuid: CounterUuid) -> int:
    platform._count("mc_read")
    return _lookup(platform, caller, uuid).value


def mc_increment(platform: PlatformState, caller: EnclaveIdentity, uuid: CounterUuid) -> int:
    platform._count("mc_increment")
    rec = _lookup(platform, caller, uuid)
    if rec.value >= COUNTER_MAX:
        raise CounterOverflow("counter at 32-bit maximum")
    rec.value += 1
    return rec.value


def mc_destroy(platform: PlatformState, caller: EnclaveIdentity, uuid: CounterUuid) -> None:
    """Destroy a counter; its id stays burned and later access fails."""
    platform._count("mc_destroy")
    rec = _lookup(platform, caller, uuid)
    rec.destroyed = True


# --- local attestation ------------------------------------------------------

def _report_key(platform: PlatformState, target: EnclaveIdentity) -> bytes:
    mac = hmac.new(platform.cpu_secret, b"report-key|" + target.encode(),
                   hashlib.sha256)
    return mac.digest()[:KEY_LEN]


def local_attest(platform: PlatformState, prover: EnclaveIdentity,
                 target: EnclaveIdentity, report_data: bytes) -> Report:
    """Produce a report for `target`; its MAC key is derivable only by the
    target identity on this same machine."""
    if len(report_data) != REPORT_DATA_LEN:
        raise ValueError("report_data must be 64 bytes")
    body = prover.encode() + target.encode() + report_data
    mac = hmac.new(_report_key(platform, target), body, hashlib.sha256).digest()[:MAC_LEN]
    return Report(prover, target, report_data, mac)


def verify_report(platform: PlatformState, verifier: EnclaveIdentity,
                  report: Report) -> bool:
    """Check a report as the targeted enclave on this platform."""
    if report.target != verifier:
        return False
    body = report.prover.encode() + report.target.encode() + report.report_data
    expect = hmac.new(_report_key(platform, verifier), body,
                      hashlib.sha256).digest()[:MAC_LEN]
    return hmac.compare_digest(expect, report.mac)


# --- remote attestation ------------------------------------------------------

def get_quote(platform: PlatformState, prover: EnclaveIdentity,
              report_data: bytes) -> Quote:
    """Sign (prover identity, report_data) with the machine quoting key."""
    if len(report_data) != REPORT_DATA_LEN:
        raise ValueError("report_data must be 64 bytes")
    body = b"quote|" + prover.encode() + report_data
    sig = platform.quoting_key.sign(body)
    return Quote(
        prover=prover,
        report_data=report_data,
        quoting_pub=platform.quoting_key.public_key().public_bytes_raw(),
        quoting_cert=platform.quoting_cert,
        signature=sig,
    )


def verify_quote(root_public: bytes, quote: Quote) -> EnclaveIdentity:
    """Verify the signature chain root -> quoting key -> quote.

    Returns the attested prover identity, or raises QuoteInvalid.
    """
    root = ed25519.Ed25519PublicKey.from_public_bytes(root_public)
    try:
        root.verify(quote.quoting_cert, b"quoting-key" + quote.quoting_pub)
        qpub = ed25519.Ed25519PublicKey.from_public_bytes(quote.quoting_pub)
        qpub.verify(quote.signature,
                    b"quote|" + quote.prover.encode() + quote.report_data)
    except InvalidSignature:
        raise QuoteInvalid("quote does not chain to the attestation root") from None
    return quote.prover
