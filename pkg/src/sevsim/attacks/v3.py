"""Instruction fetches through TLB entries a victim left behind: a non-SEV
attacker given the victim's ASID runs the victim's code without a single
page-table walk."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import SevSimError
from ..hypervisor.core import GuestVm, Hypervisor
from ..hypervisor.pools import SevClass
from ..vm_core.machine import EXIT_CPUID, EXIT_NPF, EXIT_SHUTDOWN
from ..vm_core.vmcb import TLB_FLUSH_ALL
from .v1 import NONCANONICAL_IDTR


@dataclass
class V3Result:
    cpuid_exits: list[dict[str, int]] = field(default_factory=list)   # r11/r12 at each CPUID exit
    npf_count: int = 0
    final_exit: str = ""
    regs_before: dict[str, int] = field(default_factory=dict)
    regs_after: dict[str, int] = field(default_factory=dict)

    @property
    def shutdown(self) -> bool:
        return self.final_exit == "SHUTDOWN_0x7F"

    @property
    def registers_changed(self) -> bool:
        return self.regs_before != self.regs_after


def _watch(vm: GuestVm) -> dict[str, int]:
    s = vm.vmcb.save
    return {"r11": s.reg("r11") & 0xFFFFFFFF, "r12": s.reg("r12") & 0xFFFFFFFF}


def prime_victim(hv: Hypervisor, victim: GuestVm) -> int:
    """Let the victim run its loop until its first CPUID exit; returns the RIP."""
    ex = hv.run_until_exit(victim, lambda e: e.code == EXIT_CPUID)
    hv.handle_exit(victim, ex)
    return victim.vmcb.save.rip


def v3_tlb_reuse(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, *, exits_before_irq: int = 3,
                 flush_tlb: bool = False, max_runs: int = 64) -> V3Result:
    """Resume the attacker at the victim's code address under the victim's ASID.

    The victim must have run recently enough that its code translation is
    still cached. ``flush_tlb`` is the control case.
    """
    if attacker.sev_class is not SevClass.NONE:
        raise SevSimError("the attacker must be a non-SEV guest")
    if victim.vmcb.control.sev_es:
        raise SevSimError("the victim's RIP must be readable (plain SEV)")
    rip = victim.vmcb.save.rip
    hv.set_idtr(attacker, NONCANONICAL_IDTR)
    hv.set_asid(attacker, victim.asid)
    hv.set_sev_bit(attacker, SevClass.SEV)
    hv.set_rip(attacker, rip)
    hv.set_interrupt_flag(attacker, True)
    if flush_tlb:
        hv.request_tlb_flush(attacker, TLB_FLUSH_ALL)

    res = V3Result(regs_before=_watch(attacker))
    for _ in range(max_runs):
        ex = hv.run(attacker)
        if ex.code == EXIT_NPF:
            res.npf_count += 1
            res.final_exit = ex.name
            break
        if ex.code == EXIT_CPUID:
            res.cpuid_exits.append(_watch(attacker))
            hv.handle_exit(attacker, ex)
            if len(res.cpuid_exits) == exits_before_irq:
                hv.inject_virq(attacker)   # forces a trip through the IDT
            continue
        if ex.code == EXIT_SHUTDOWN:
            res.final_exit = ex.name
            break
        res.final_exit = ex.name
    res.regs_after = _watch(attacker)
    return res
