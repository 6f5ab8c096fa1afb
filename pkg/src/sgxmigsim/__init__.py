"""Simulator for migrating SGX enclaves together with their persistent state.

Modules:
  sgx      simulated platform primitives (sealing, counters, attestation)
  netsim   deterministic network/VM simulation with an in-path adversary
  library  in-enclave migration library (migratable sealing and counters)
  enclave  per-machine migration enclave service
  harness  scenario runner, attack scripts, benchmarks and CLI
"""

from . import enclave, errors, library, netsim, sgx

__version__ = "0.1.0"

__all__ = ["sgx", "netsim", "library", "enclave", "errors", "__version__"]
