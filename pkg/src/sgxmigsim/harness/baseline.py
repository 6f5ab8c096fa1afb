"""Insecure strawman used to demonstrate the attacks.

The naive library transfers the migration sealing key so sealed data
stays readable on the destination, but it neither destroys the source's
native counters nor installs counter offsets at the destination. Both
attack scripts succeed against it.
"""

from __future__ import annotations

from ..errors import NotAwaiting
from ..library import SLOTS, LibraryInternals, MigrationData, MigrationLibrary, _Status
from .. import sgx


class NaiveMigrationLibrary(MigrationLibrary):
    """MigrationLibrary without counter hand-off: MSK travels, counters do not."""

    def _collect_and_release_counters(self) -> list[int]:
        # read the values for the wire format but leave every native counter
        # alive on this machine
        values = [0] * SLOTS
        for slot in range(SLOTS):
            if self.internals.active[slot] and self.internals.uuids[slot] is not None:
                native = sgx.mc_read(self.platform, self.identity,
                                     self.internals.uuids[slot])
                values[slot] = native + self.internals.offsets[slot]
        return values

    def receive_incoming(self, data: MigrationData) -> None:
        if self.status is not _Status.AWAITING:
            raise NotAwaiting("library is not awaiting incoming state")
        # keep the key; counters cannot travel, so recreate every active
        # slot from scratch and discard the shipped values
        internals = LibraryInternals(msk=data.msk)
        for slot in range(SLOTS):
            if data.active[slot]:
                uuid, _ = sgx.mc_create(self.platform, self.identity)
                internals.active[slot] = True
                internals.uuids[slot] = uuid
        self.internals = internals
        self.status = _Status.RUNNING
        self._persist()
