"""Error taxonomy shared across the simulator.

Every failure that crosses a module boundary is an instance of SimError so
harness code can catch simulation failures without masking programming bugs.
"""


class SimError(Exception):
    """Base class for all simulated-platform and protocol failures."""


# --- simulated SGX platform ---------------------------------------------

class AuthFailure(SimError):
    """AEAD authentication failed: wrong key or modified blob."""


class CounterNotFound(SimError):
    """Counter is unknown, destroyed, or owned by another enclave.

    Wrong-owner access is deliberately indistinguishable from a missing
    counter so existence does not leak across enclaves.
    """


class CounterLimitExceeded(SimError):
    """An enclave may hold at most 256 live counters."""


class CounterOverflow(SimError):
    """Increment would push the counter value past the 32-bit maximum."""


class QuoteInvalid(SimError):
    """Quote signature chain did not verify against the attestation root."""


# --- migration library ---------------------------------------------------

class Frozen(SimError):
    """Library has handed its state off; application calls are refused."""


class FrozenBuffer(SimError):
    """Persisted state buffer carries the frozen flag; refuse to operate."""


class NotAwaiting(SimError):
    """Incoming migration data arrived but the library was not waiting."""


class CounterDestroyFailure(SimError):
    """A native counter could not be destroyed during migration hand-off."""


# --- attestation and channels --------------------------------------------

class AttestationFailure(SimError):
    """Local or remote attestation did not complete."""


class BindingMismatch(SimError):
    """Key-agreement message does not match the digest bound in the report."""


class ChannelFailure(SimError):
    """Secure channel could not be used (missing, broken, or rejected)."""


class ReplayError(SimError):
    """Frame sequence number did not match the receiver's expectation."""


# --- migration enclave ----------------------------------------------------

class NotProvisioned(SimError):
    """Migration enclave has no data-center credential installed."""


class AlreadyProvisioned(SimError):
    """Data-center credential may only be installed once."""


class PeerIdentityMismatch(SimError):
    """Remote peer's measured identity is not a genuine migration enclave."""


class OperatorMismatch(SimError):
    """Remote peer is not certified by the same data-center operator."""


class MigrationBusy(SimError):
    """An outstanding migration already exists for this source enclave."""


# --- network / host simulation -------------------------------------------

class UnknownEndpoint(SimError):
    """Message addressed to an endpoint nobody registered."""


class ManagementVmImmovable(SimError):
    """Management VM stores are pinned to their machine."""


class StoreLocality(SimError):
    """VM store accessed from a machine it does not currently live on."""


class ScriptError(SimError):
    """Scenario script is malformed or referenced an unknown entity."""
