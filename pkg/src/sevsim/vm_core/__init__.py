"""vCPU execution: VMCB layout, TLB/cache, mini-ISA and the VMRUN path."""

from .machine import (
    DIGEST_ALGORITHM,
    EXIT_CPUID,
    EXIT_INTR,
    EXIT_INVALID,
    EXIT_NPF,
    EXIT_SHUTDOWN,
    Dram,
    Machine,
    MachineConfig,
    ProtectedDram,
    VmExit,
    vmsa_digest,
)
from .tlb import Cache, CacheLine, Tlb, TlbEntry
from .vmcb import SaveState, Vmcb, VmcbControl, vmcb_restore, vmcb_snapshot

__all__ = [
    "DIGEST_ALGORITHM", "EXIT_CPUID", "EXIT_INTR", "EXIT_INVALID", "EXIT_NPF", "EXIT_SHUTDOWN",
    "Cache", "CacheLine", "Dram", "Machine", "MachineConfig", "ProtectedDram", "SaveState",
    "Tlb", "TlbEntry", "VmExit", "Vmcb", "VmcbControl", "vmcb_restore", "vmcb_snapshot", "vmsa_digest",
]
