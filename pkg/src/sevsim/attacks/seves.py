"""Page-table leakage against SEV-ES guests.

The attacker cannot pick RIP any more: its VMCB points at the victim's own
encrypted save area, so every walk starts from whatever RIP the victim was
paused at. Which 8-byte offset of a target page is read is decided by that
RIP's four index fields.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..errors import IntegrityError, SevSimError
from ..hypervisor.core import GuestVm, Hypervisor
from ..hypervisor.image import GuestImage
from ..hypervisor.pools import SevClass
from ..paging import PAGE_MASK, PFN_MASK, PTE_P, leaked_known_mask, pfn_from_fault
from ..vm_core.machine import EXIT_CPUID, EXIT_NPF, EXIT_SHUTDOWN, VmExit
from ..vm_core.vmcb import TLB_FLUSH_ASID
from ..workloads import build_task_victim
from .report import RMP_BLOCKED, UNLEAKABLE, BlockResult, LeakedBlock, LeakReport, OffsetCoverage

OFFSETS = 512


def expected_coverage(k: int, space: int = OFFSETS) -> float:
    """Mean number of distinct values after ``k`` uniform draws."""
    return space * (1 - (1 - 1 / space) ** k)


class SevEsReader:
    """An SEV-ES attacker VM running on a paused victim's VMSA."""

    def __init__(self, hv: Hypervisor, victim: GuestVm, attacker: GuestVm,
                 report: Optional[LeakReport] = None):
        for vm in (victim, attacker):
            if vm.sev_class is not SevClass.SEV_ES:
                raise SevSimError(f"{vm.vm_id} is not an SEV-ES guest")
        self.hv = hv
        self.victim = victim
        self.attacker = attacker
        self.report = report if report is not None else LeakReport()
        self.chain: list[int] = []      # victim table gPAs, root first
        self.offsets: list[int] = []    # entry offsets used in each of those tables
        hv.set_vmsa_ptr(attacker, victim.vmsa_ptr)
        hv.set_asid(attacker, victim.asid)

    def _fire(self, maps: dict[int, int]) -> VmExit:
        hv, att = self.hv, self.attacker
        hv.clear_present_bits(att)
        for gpa, spfn in maps.items():
            hv.map_gpa(att, gpa, spfn)
        hv.clear_exitintinfo(att)
        hv.request_tlb_flush(att, TLB_FLUSH_ASID)
        hv.revive(att)
        ex = hv.run(att)
        if ex.integrity_error:
            raise IntegrityError(ex.detail or "VMSA integrity check failed")
        return ex

    def _real(self, tables: list[int]) -> dict[int, int]:
        return {t: self.victim.spa_of(t) >> 12 for t in tables}

    def locate(self) -> list[int]:
        """Follow the victim's own walk of its RIP as far as it goes.

        Returns the entry offsets seen, root table first (one to four).
        """
        self.chain, self.offsets = [], []
        ex = self._fire({})
        while ex.code == EXIT_NPF and not ex.event_pending and not ex.is_rmp_fault:
            self.chain.append(ex.exitinfo2 & ~PAGE_MASK & PFN_MASK)
            self.offsets.append(ex.exitinfo2 & PAGE_MASK)
            if len(self.chain) == 4:
                break   # the next fault would be the code page, not a table
            ex = self._fire(self._real(self.chain))
        return list(self.offsets)

    def read(self, spa_page: int, level: int = 4) -> BlockResult:
        """Read the block of ``spa_page`` at the offset the walk uses at ``level``."""
        if not self.chain:
            self.locate()
        depth = 4 - level
        if depth >= len(self.chain):
            raise SevSimError(f"the victim's walk never reaches level {level}")
        spa_page &= ~PAGE_MASK
        maps = self._real(self.chain[:depth])
        maps[self.chain[depth]] = spa_page >> 12
        spa0 = spa_page | self.offsets[depth]
        ex = self._fire(maps)
        result = self._decode(spa0, ex, level == 1)
        self.report.record(spa0, result)
        return result

    def _decode(self, spa0: int, ex: VmExit, last_level: bool) -> BlockResult:
        if ex.code == EXIT_NPF and ex.is_rmp_fault:
            self.report.rmp_fault_count += 1
            return RMP_BLOCKED
        if ex.code == EXIT_NPF:
            self.report.npf_count += 1
            if ex.event_pending:
                return UNLEAKABLE
            value = (pfn_from_fault(ex.exitinfo2) << 12) | PTE_P
            step = self.hv.trace.step   # the VMEXIT record that carried it
            self.hv.trace.emit("LEAK", spa=spa0, value=value, exitinfo2=ex.exitinfo2, exit_step=step)
            return LeakedBlock(spa0, value, leaked_known_mask(last_level), last_level, step, ex.exitinfo2)
        if ex.code == EXIT_SHUTDOWN:
            self.report.triple_fault_count += 1
        return UNLEAKABLE

    def finish(self) -> None:
        self.hv.request_tlb_flush(self.victim, TLB_FLUSH_ASID)


def seves_v1_read(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, spa0: int,
                  reader: Optional[SevEsReader] = None) -> BlockResult:
    """Read ``spa0`` if the paused victim's RIP makes its offset reachable."""
    reader = reader or SevEsReader(hv, victim, attacker)
    offsets = reader.locate() if not reader.chain else reader.offsets
    off = spa0 & PAGE_MASK
    if off not in offsets:
        raise SevSimError(f"offset {off:#x} not selected by the victim's RIP (have {offsets})")
    return reader.read(spa0 & ~PAGE_MASK, 4 - offsets.index(off))


# -- offset coverage ------------------------------------------------------------

@dataclass
class CampaignParams:
    rounds: int = 6
    round_steps: int = 15000      # retired victim instructions per round
    n_tasks: int = 384
    movs: int = 12
    clear_every: int = 3000       # steps between present-bit sweeps
    pause_every: int = 13         # pause on every n-th nested fault


@dataclass
class CampaignRound:
    offsets: set[int] = field(default_factory=set)
    captures: int = 0
    npfs: int = 0
    retired: int = 0


TaskVictimFactory = Callable[[random.Random], tuple[GuestImage, list[int]]]


def _run_round(hv: Hypervisor, attacker: GuestVm, image: GuestImage, tasks: list[int],
               rng: random.Random, p: CampaignParams, vm_id: str) -> CampaignRound:
    m = hv.machine
    victim = hv.launch_vm(image, SevClass.SEV_ES, vm_id)
    reader = SevEsReader(hv, victim, attacker)
    out = CampaignRound()
    since_clear = p.clear_every   # start with a sweep
    try:
        while out.retired < p.round_steps:
            if since_clear >= p.clear_every:
                hv.clear_present_bits(victim)
                hv.request_tlb_flush(victim, TLB_FLUSH_ASID)
                since_clear = 0
            ex = hv.run(victim)
            out.retired += ex.retired
            since_clear += ex.retired
            if ex.code == EXIT_NPF:
                out.npfs += 1
                # automatic exits only: an interrupt window means a #VC path
                if out.npfs % p.pause_every == 0 and not victim.vmcb.control.v_irq:
                    out.offsets.update(reader.locate())
                    out.captures += 1
                hv.handle_exit(victim, ex)
            elif ex.code == EXIT_CPUID:
                hv.handle_exit(victim, ex)
                nxt = rng.choice(tasks)

                def switch(s, rip=nxt):
                    s.rip = rip
                m.guest_update_vmsa(victim.vmsa_ptr, victim.asid, switch)
            elif ex.code == EXIT_SHUTDOWN or ex.integrity_error:
                raise SevSimError(f"victim died during the campaign: {ex.name}")
    finally:
        hv.teardown(victim)
    return out


def seves_offset_campaign(hv: Hypervisor, attacker: GuestVm, rng: random.Random,
                          params: Optional[CampaignParams] = None,
                          factory: Optional[TaskVictimFactory] = None) -> tuple[OffsetCoverage, list[CampaignRound]]:
    """One fresh (re-randomised) victim per round; offsets captured from the
    RIPs it happens to be paused at."""
    p = params or CampaignParams()
    if factory is None:
        def factory(r: random.Random) -> tuple[GuestImage, list[int]]:
            return build_task_victim(r, p.n_tasks, movs=p.movs)
    rounds = []
    for i in range(p.rounds):
        image, tasks = factory(rng)
        rounds.append(_run_round(hv, attacker, image, tasks, rng, p, f"campaign-victim-{i}"))
    return OffsetCoverage([r.offsets for r in rounds]), rounds


def uniform_rip_coverage(hv: Hypervisor, attacker: GuestVm, rng: random.Random, k: int,
                         vm_id: str = "uniform-victim") -> int:
    """Distinct offsets after ``k`` captured offsets, the victim's RIP being set
    to uniformly random mapped canonical addresses (four offsets each)."""
    n_rips = -(-k // 4)
    image, tasks = build_task_victim(rng, n_rips, movs=1)
    victim = hv.launch_vm(image, SevClass.SEV_ES, vm_id)
    reader = SevEsReader(hv, victim, attacker)
    samples: list[int] = []
    try:
        for rip in tasks:
            def jump(s, rip=rip):
                s.rip = rip
            hv.machine.guest_update_vmsa(victim.vmsa_ptr, victim.asid, jump)
            samples.extend(reader.locate())
    finally:
        hv.teardown(victim)
    return len(set(samples[:k]))
