"""The simulated SoC and the VMRUN/VMEXIT path."""

from __future__ import annotations

import hashlib
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from ..crypto_engine import PA_MASK, CryptoEngine, KeySelection, guest_key, select_key, strip_cbit
from ..errors import (
    GeneralProtection,
    GuestPageFault,
    IllegalAsidRange,
    NestedPageFault,
    NonCanonicalAddress,
    UndefinedInstruction,
)
from ..paging import PAGE_MASK, PAGE_SIZE, Npt, WalkContext, guest_walk, is_canonical
from . import isa
from .tlb import LINE, Cache, Tlb
from .vmcb import (
    CLEAN_ASID,
    CLEAN_NP,
    EXITINTINFO_VALID,
    M64,
    RFLAGS_IF,
    TLB_FLUSH_ALL,
    TLB_FLUSH_ASID,
    VMSA_SIZE,
    SaveState,
    Vmcb,
)

EXIT_INTR = 0x60
EXIT_CPUID = 0x72
EXIT_SHUTDOWN = 0x7F
EXIT_NPF = 0x400
EXIT_INVALID = -1

DIGEST_ALGORITHM = "sha256"

VEC_DE, VEC_UD, VEC_DF, VEC_GP, VEC_PF = 0, 6, 8, 13, 14
VEC_VIRQ = 0x20
GATE_INTERRUPT = 0x8E
EVENT_TYPE_INTR = 0 << 8
EVENT_TYPE_EXCEPTION = 3 << 8

NPF_RMP = 1 << 31


@dataclass
class MachineConfig:
    tweak_seed: int = 0
    key_seed: int = 0
    snp_mode: bool = False
    max_all: int = 32768         # CPUID 8000000A EBX
    max_sev: int = 15            # CPUID 8000001F ECX
    min_sev_non_es: int = 5      # CPUID 8000001F EDX
    step_budget: int = 64


@dataclass
class VmExit:
    code: int
    exitinfo1: int = 0
    exitinfo2: int = 0
    exitintinfo: int = 0
    retired: int = 0
    nrip: int = 0
    integrity_error: bool = False
    detail: str = ""

    @property
    def name(self) -> str:
        if self.integrity_error:
            return "VMRUN_INTEGRITY_ERROR"
        return {
            EXIT_NPF: "NPF",
            EXIT_SHUTDOWN: "SHUTDOWN_0x7F",
            EXIT_CPUID: "CPUID",
            EXIT_INTR: "STEP_BUDGET",
            EXIT_INVALID: "VMRUN_INVALID",
        }.get(self.code, f"EXIT_{self.code:#x}")

    @property
    def is_npf(self) -> bool:
        return self.code == EXIT_NPF

    @property
    def is_rmp_fault(self) -> bool:
        return self.code == EXIT_NPF and bool(self.exitinfo1 & NPF_RMP)

    @property
    def is_shutdown(self) -> bool:
        return self.code == EXIT_SHUTDOWN

    @property
    def event_pending(self) -> bool:
        return bool(self.exitintinfo & EXITINTINFO_VALID)


class RmpChecker(Protocol):
    def check(self, spa: int, asid: int, gpa: int) -> None: ...

    def check_vmsa(self, spa: int, asid: int) -> bool: ...


class Dram:
    """Sparse physical memory holding ciphertext."""

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}

    def page(self, spfn: int) -> bytearray:
        p = self.pages.get(spfn)
        if p is None:
            p = self.pages[spfn] = bytearray(PAGE_SIZE)
        return p

    def read(self, spa: int, n: int) -> bytes:
        out = bytearray()
        while n:
            off = spa & PAGE_MASK
            take = min(n, PAGE_SIZE - off)
            p = self.pages.get(spa >> 12)
            out += p[off:off + take] if p is not None else bytes(take)
            spa += take
            n -= take
        return bytes(out)

    def write(self, spa: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            off = spa & PAGE_MASK
            take = min(len(data) - pos, PAGE_SIZE - off)
            self.page(spa >> 12)[off:off + take] = data[pos:pos + take]
            spa += take
            pos += take


class ProtectedDram:
    """VMSA integrity values, indexed by the VMSA's system physical address.

    Only the VMRUN/VMEXIT path and the launch firmware touch this.
    """

    def __init__(self) -> None:
        self._digests: dict[int, bytes] = {}

    def get(self, spa: int) -> Optional[bytes]:
        return self._digests.get(spa)

    def put(self, spa: int, digest: bytes) -> None:
        self._digests[spa] = digest

    def __contains__(self, spa: int) -> bool:
        return spa in self._digests


def vmsa_digest(plain: bytes) -> bytes:
    return hashlib.new(DIGEST_ALGORITHM, plain).digest()


class Machine:
    def __init__(self, config: Optional[MachineConfig] = None):
        self.config = config or MachineConfig()
        cfg = self.config
        self.engine = CryptoEngine(cfg.tweak_seed, cfg.key_seed)
        self.dram = Dram()
        self.cache = Cache(self._fill, self._spill)
        self.engine.cache_writeback = self.cache.wbinvd
        self.tlb = Tlb()
        self.npts: dict[int, Npt] = {}
        self.protected = ProtectedDram()
        self.rmp: Optional[RmpChecker] = None
        # hardware copy of VMCB fields covered by clean bits, keyed by VMCB spa
        self._vmcb_state: dict[int, tuple[int, int]] = {}
        self._frame_rng = random.Random((cfg.key_seed << 1) ^ 0x5EF)
        self._used_frames: set[int] = set()
        self.retired_total = 0
        self.exit_counts: Counter = Counter()
        # ground-truth (oracle) accesses; attack phases must leave this unchanged
        self.audit: Counter = Counter()
        self.guest_updates = 0

    # -- physical frames -----------------------------------------------------

    def alloc_frame(self) -> int:
        while True:
            spfn = self._frame_rng.randrange(0x100, 1 << 24)
            if spfn not in self._used_frames:
                self._used_frames.add(spfn)
                return spfn

    # -- memory datapath -----------------------------------------------------

    def _fill(self, spa_line: int, sel: KeySelection) -> bytes:
        return self.engine.decrypt(sel, spa_line, self.dram.read(spa_line, LINE), allow_retired=True)

    def _spill(self, spa_line: int, sel: KeySelection, data: bytes) -> None:
        self.dram.write(spa_line, self.engine.encrypt(sel, spa_line, data, allow_retired=True))

    def firmware_write(self, spa: int, data: bytes, sel: KeySelection) -> None:
        """Launch-time encryption of a whole page straight into DRAM."""
        self.dram.write(spa, self.engine.encrypt(sel, spa, data))

    def wbinvd(self) -> None:
        self.engine.wbinvd()

    def oracle_read(self, spa: int, n: int, sel: KeySelection, asid: int, cbit: int) -> bytes:
        """Coherent plaintext view for assertions; never used by attacks."""
        self.audit["oracle_read"] += 1
        out = bytearray()
        spa = strip_cbit(spa)
        while n:
            base = spa & ~(LINE - 1)
            off = spa - base
            take = min(n, LINE - off)
            line = self.cache.probe(base, asid, cbit)
            data = line.data if line is not None else self._fill(base, sel)
            out += data[off:off + take]
            spa += take
            n -= take
        return bytes(out)

    # -- SEV-ES save area ----------------------------------------------------

    def _vmsa_plain(self, ptr: int, asid: int) -> Optional[bytes]:
        if not self.engine.is_active(asid):
            return None
        return self.engine.decrypt(guest_key(asid), ptr, self.dram.read(ptr, VMSA_SIZE))

    def _vmsa_store(self, ptr: int, asid: int, plain: bytes) -> None:
        self.dram.write(ptr, self.engine.encrypt(guest_key(asid), ptr, plain))
        self.protected.put(ptr, vmsa_digest(plain))

    def install_vmsa(self, ptr: int, asid: int, state: SaveState) -> None:
        """Launch firmware: encrypt the initial VMSA and record its digest."""
        self._vmsa_store(ptr, asid, state.to_bytes())

    def guest_update_vmsa(self, ptr: int, asid: int, update: Callable[[SaveState], None]) -> None:
        """Register changes the guest makes to itself (e.g. its scheduler
        switching tasks). Goes through the same save path as a VMEXIT."""
        self.guest_updates += 1
        plain = bytearray(self._vmsa_plain(ptr, asid))
        state = SaveState.unpack_from(plain)
        update(state)
        state.pack_into(plain)
        self._vmsa_store(ptr, asid, bytes(plain))

    def oracle_vmsa(self, ptr: int, asid: int) -> SaveState:
        self.audit["oracle_vmsa"] += 1
        return SaveState.unpack_from(self._vmsa_plain(ptr, asid))

    # -- VMRUN ---------------------------------------------------------------

    def asid_legal(self, asid: int, sev: bool, sev_es: bool) -> bool:
        cfg = self.config
        if sev_es:
            return 1 <= asid < cfg.min_sev_non_es
        if sev:
            return cfg.min_sev_non_es <= asid <= cfg.max_sev
        return 1 <= asid <= cfg.max_all

    def vmrun(self, vmcb: Vmcb, step_budget: Optional[int] = None) -> VmExit:
        c = vmcb.control
        budget = step_budget if step_budget is not None else self.config.step_budget

        asid, ncr3 = c.asid, c.ncr3
        cached = self._vmcb_state.get(vmcb.spa)
        if cached is not None:
            if c.clean_bits & CLEAN_ASID:
                asid = cached[0]
            if c.clean_bits & CLEAN_NP:
                ncr3 = cached[1]
        self._vmcb_state[vmcb.spa] = (asid, ncr3)

        if not self.asid_legal(asid, c.sev or c.sev_es, c.sev_es):
            raise IllegalAsidRange(f"ASID {asid} illegal for sev={c.sev} sev_es={c.sev_es}")

        vmsa_plain = None
        if c.sev_es:
            vmsa_plain = self._vmsa_plain(c.vmsa_ptr, asid)
            digest = self.protected.get(c.vmsa_ptr)
            if vmsa_plain is None or digest is None or vmsa_digest(vmsa_plain) != digest:
                return self._finish(vmcb, VmExit(EXIT_INVALID, integrity_error=True, detail="VMSA integrity"))
            if self.config.snp_mode and self.rmp is not None and not self.rmp.check_vmsa(c.vmsa_ptr, asid):
                return self._finish(vmcb, VmExit(EXIT_INVALID, detail="VMSA page not owned by ASID"))
            state = SaveState.unpack_from(vmsa_plain)
        else:
            state = vmcb.save.copy()
        encrypted = c.sev or c.sev_es
        if encrypted and not self.engine.is_active(asid):
            return self._finish(vmcb, VmExit(EXIT_INVALID, detail=f"no VEK for ASID {asid}"))

        if c.tlb_control == TLB_FLUSH_ALL:
            self.tlb.flush_all()
        elif c.tlb_control == TLB_FLUSH_ASID:
            self.tlb.flush_asid(asid)

        npt = self.npts.get(ncr3)
        if npt is None:
            return self._finish(vmcb, VmExit(EXIT_INVALID, detail=f"no nested table at {ncr3:#x}"))

        rmp = self.rmp.check if (self.config.snp_mode and encrypted and self.rmp is not None) else None
        cpu = _Cpu(self, state, asid, npt, encrypted, c.sev_es, rmp)
        exit_ = cpu.run(vmcb, budget)
        self.retired_total += exit_.retired

        if c.sev_es:
            plain = bytearray(vmsa_plain)
            state.pack_into(plain)
            self._vmsa_store(c.vmsa_ptr, asid, bytes(plain))
            exit_.nrip = 0
        else:
            vmcb.save = state
        return self._finish(vmcb, exit_)

    def _finish(self, vmcb: Vmcb, exit_: VmExit) -> VmExit:
        c = vmcb.control
        c.exitcode = exit_.code
        c.exitinfo1 = exit_.exitinfo1
        c.exitinfo2 = exit_.exitinfo2
        c.exitintinfo = exit_.exitintinfo
        c.nrip = exit_.nrip
        self.exit_counts[exit_.name] += 1
        return exit_


_GUEST_FAULTS = (GuestPageFault, UndefinedInstruction, NonCanonicalAddress, GeneralProtection)


def _vector_of(fault: Exception) -> tuple[int, Optional[int]]:
    """(vector, CR2 value or None) for a guest-visible fault."""
    if isinstance(fault, GuestPageFault):
        return VEC_PF, fault.gva
    if isinstance(fault, UndefinedInstruction):
        return VEC_UD, None
    return VEC_GP, None


class _WalkMem:
    __slots__ = ("cache", "asid")

    def __init__(self, cache: Cache, asid: int):
        self.cache = cache
        self.asid = asid

    def read_qword(self, spa: int, sel: KeySelection, ctag: int) -> int:
        return int.from_bytes(self.cache.read(spa, 8, self.asid, ctag, sel), "little")


class _Cpu:
    """One VMRUN's worth of guest execution."""

    def __init__(self, m: Machine, state: SaveState, asid: int, npt: Npt, encrypted: bool, sev_es: bool, rmp):
        self.m = m
        self.s = state
        self.asid = asid
        self.encrypted = encrypted
        self.sev_es = sev_es
        self.ctx = WalkContext(gcr3=state.cr3, asid=asid, npt=npt, encrypted=encrypted, rmp_check=rmp)
        self.mem = _WalkMem(m.cache, asid)
        self.retired = 0

    # -- translation and memory ------------------------------------------------

    def translate(self, gva: int):
        if not is_canonical(gva):
            raise NonCanonicalAddress(f"{gva:#x}")
        e = self.m.tlb.lookup(self.asid, gva)
        if e is None:
            self.ctx.gcr3 = self.s.cr3
            r = guest_walk(gva, self.ctx, self.mem)
            e = self.m.tlb.insert(self.asid, gva, r.spa_page, r.gc, r.nc)
        return e

    def _access(self, gva: int, n: int, fetch: bool, data: Optional[bytes] = None) -> bytes:
        out = bytearray()
        pos = 0
        while pos < n:
            off = gva & PAGE_MASK
            take = min(n - pos, PAGE_SIZE - off)
            e = self.translate(gva)
            spa = e.spa_page | off
            if not self.encrypted:
                sel, cbit = select_key(0, e.nc, self.asid), e.nc
            elif fetch:
                sel, cbit = select_key(1, e.nc, self.asid, forced_private=True), 1 ^ e.nc
            else:
                sel, cbit = select_key(e.gc, e.nc, self.asid), e.gc ^ e.nc
            if data is None:
                out += self.m.cache.read(spa, take, self.asid, cbit, sel)
            else:
                self.m.cache.write(spa, data[pos:pos + take], self.asid, cbit, sel)
            gva = (gva + take) & M64
            pos += take
        return bytes(out)

    def read(self, gva: int, n: int) -> bytes:
        return self._access(gva, n, fetch=False)

    def write(self, gva: int, data: bytes) -> None:
        self._access(gva, len(data), fetch=False, data=data)

    def fetch_decode(self, rip: int) -> isa.Insn:
        buf = bytearray()

        def byte_at(i: int) -> int:
            while i >= len(buf):
                a = (rip + len(buf)) & M64
                chunk = min(16 - len(buf), PAGE_SIZE - (a & PAGE_MASK))
                buf.extend(self._access(a, chunk, fetch=True))
            return buf[i]

        return isa.decode(byte_at, rip)

    # -- execution -------------------------------------------------------------

    def execute(self, insn: isa.Insn) -> None:
        s = self.s
        if insn.op == isa.MOV_IMM:
            s.regs[insn.reg] = insn.imm
        elif insn.op == isa.LOAD:
            s.regs[insn.reg] = int.from_bytes(self.read(s.regs[insn.base], 8), "little")
        elif insn.op == isa.STORE:
            self.write(s.regs[insn.base], s.regs[insn.reg].to_bytes(8, "little"))
        if insn.op == isa.JMP:
            s.rip = (s.rip + insn.length + insn.imm) & M64
        else:
            s.rip = (s.rip + insn.length) & M64

    def deliver(self, vector: int) -> None:
        gate = self.read((self.s.idtr_base + vector * 16) & M64, 16)
        if gate[5] != GATE_INTERRUPT:
            raise GeneralProtection(f"bad gate for vector {vector}")
        handler = (int.from_bytes(gate[0:2], "little")
                   | int.from_bytes(gate[6:8], "little") << 16
                   | int.from_bytes(gate[8:12], "little") << 32)
        self.fetch_decode(handler)
        self.s.rflags &= ~RFLAGS_IF
        self.s.rip = handler

    def raise_event(self, vector: int, failures: int, event_type: int) -> Optional[VmExit]:
        """Deliver ``vector``; escalate through #DF to shutdown.

        ``failures`` counts faults already taken (1 when entering from a
        faulting instruction, 0 for an injected interrupt). The third one
        shuts the guest down.
        """
        while True:
            try:
                self.deliver(vector)
                return None
            except NestedPageFault as e:
                return self._npf(e, EXITINTINFO_VALID | event_type | vector)
            except _GUEST_FAULTS as f:
                failures += 1
                if failures >= 3:
                    return VmExit(EXIT_SHUTDOWN, retired=self.retired)
                v, cr2 = _vector_of(f)
                if cr2 is not None:
                    self.s.cr2 = cr2
                vector = VEC_DF if failures == 2 else v
                event_type = EVENT_TYPE_EXCEPTION

    def _npf(self, e: NestedPageFault, exitintinfo: int = 0) -> VmExit:
        info1 = NPF_RMP if e.rmp else 0
        return VmExit(EXIT_NPF, exitinfo1=info1, exitinfo2=e.gpa, exitintinfo=exitintinfo, retired=self.retired)

    def run(self, vmcb: Vmcb, budget: int) -> VmExit:
        c = vmcb.control
        s = self.s
        if c.exitintinfo & EXITINTINFO_VALID:
            info = c.exitintinfo
            c.exitintinfo = 0
            ex = self.raise_event(info & 0xFF, 0, info & (7 << 8))
            if ex is not None:
                return ex
        elif c.v_irq and s.rflags & RFLAGS_IF:
            c.v_irq = False
            ex = self.raise_event(VEC_VIRQ, 0, EVENT_TYPE_INTR)
            if ex is not None:
                return ex

        for _ in range(budget):
            try:
                insn = self.fetch_decode(s.rip)
                if insn.op == isa.CPUID:
                    nrip = (s.rip + insn.length) & M64
                    if self.sev_es:
                        # the guest's #VC handler completes the request via the GHCB
                        s.rip = nrip
                    return VmExit(EXIT_CPUID, retired=self.retired, nrip=nrip)
                self.execute(insn)
                self.retired += 1
            except NestedPageFault as e:
                return self._npf(e)
            except _GUEST_FAULTS as f:
                v, cr2 = _vector_of(f)
                if cr2 is not None:
                    s.cr2 = cr2
                ex = self.raise_event(v, 1, EVENT_TYPE_EXCEPTION)
                if ex is not None:
                    return ex
        return VmExit(EXIT_INTR, retired=self.retired, nrip=s.rip, detail="step budget")
