"""Versioned-state demo application.

Models the pattern the attacks target: the app seals {version, payload}
where version is the value of one migratable monotonic counter, and on
load accepts a package only if its version equals the counter's current
effective value. Anything older is a rollback; anything newer is a
forgery.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import sgx
from ..errors import SimError
from ..library import MigrationLibrary

APP_AAD = b"versioned-state"
APP_SLOT = 0  # the app owns the first counter slot


@dataclass
class LoadResult:
    accepted: bool
    version: int | None = None
    current: int | None = None
    payload: bytes | None = None
    error: str | None = None

    def outcome(self) -> str:
        if self.error is not None:
            return f"error:{self.error}"
        return "accepted" if self.accepted else "rejected"


class VersionedApp:
    """Application logic living inside the enclave next to the library."""

    def __init__(self, lib: MigrationLibrary, storage_key: str):
        self.lib = lib
        self.storage_key = storage_key
        self.version = 0  # last version persisted by this instance

    def _store(self):
        return self.lib.sim.store(self.lib.vm_id, self.lib.platform.machine)

    def persist(self, payload: bytes) -> int:
        """Advance the counter and seal the new state under its value."""
        if not self.lib.internals.active[APP_SLOT]:
            slot, _ = self.lib.create_migratable_counter()
            if slot != APP_SLOT:
                raise SimError(f"expected slot {APP_SLOT}, got {slot}")
        version = self.lib.increment_migratable_counter(APP_SLOT)
        blob = self.lib.seal_migratable(version.to_bytes(4, "big") + payload, APP_AAD)
        self._store().put(self.storage_key, blob.encode())
        self.version = version
        return version

    def load(self, package: bytes | None = None) -> LoadResult:
        """Check a state package (the stored one by default) against the counter."""
        raw = package if package is not None else self._store().get(self.storage_key)
        if raw is None:
            return LoadResult(accepted=False, error="NoPackage")
        try:
            blob = sgx.SealedBlob.decode(raw)
            plaintext, _ = self.lib.unseal_migratable(blob)
            version = int.from_bytes(plaintext[:4], "big")
            payload = plaintext[4:]
        except SimError as exc:
            return LoadResult(accepted=False, error=type(exc).__name__)
        try:
            current = self.lib.read_migratable_counter(APP_SLOT)
        except SimError as exc:
            return LoadResult(accepted=False, version=version,
                              error=type(exc).__name__)
        return LoadResult(accepted=version == current, version=version,
                          current=current, payload=payload)
