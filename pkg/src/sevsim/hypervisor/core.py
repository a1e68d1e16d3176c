"""VM lifecycle, exit dispatch and the privileged knobs a hypervisor holds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..crypto_engine import PLAINTEXT, guest_key
from ..errors import SevSimError, VmCrashed
from ..paging import PAGE_MASK, Npt
from ..trace import Trace
from ..vm_core.machine import (
    EXIT_CPUID,
    EXIT_INTR,
    EXIT_NPF,
    EXIT_SHUTDOWN,
    Machine,
    VmExit,
)
from ..vm_core.vmcb import (
    CLEAN_ALL,
    CLEAN_ASID,
    RFLAGS_IF,
    TLB_FLUSH_ASID,
    TLB_NOTHING,
    SaveState,
    Vmcb,
    VmcbControl,
)
from .image import GuestImage
from .pools import AsidPools, SevClass
from .rmp import Rmp

CPUID_SEV_LEAF = 0x8000001F
CPUID_SVM_LEAF = 0x8000000A


@dataclass
class GuestVm:
    vm_id: str
    sev_class: SevClass
    asid: int
    vmcb: Vmcb
    npt: Npt
    ncr3: int
    backing: dict[int, int]                 # gPFN -> sPFN, the hypervisor's own record
    vmsa_ptr: int = 0
    crashed: bool = False
    # plaintext image; assertions only, never an input to an attack
    ground_truth: Optional[GuestImage] = field(default=None, repr=False)

    @property
    def encrypted(self) -> bool:
        return self.sev_class is not SevClass.NONE

    def spa_of(self, gpa: int) -> int:
        """Hypervisor-side gPA -> sPA using its own backing record."""
        return (self.backing[gpa >> 12] << 12) | (gpa & PAGE_MASK)


@dataclass
class Dispatch:
    action: str
    exit: VmExit
    detail: dict[str, Any] = field(default_factory=dict)


NpfHook = Callable[[GuestVm, VmExit], Optional[str]]


class Hypervisor:
    def __init__(self, machine: Machine, trace: Optional[Trace] = None):
        self.machine = machine
        cfg = machine.config
        self.pools = AsidPools(cfg.max_all, cfg.max_sev, cfg.min_sev_non_es)
        self.trace = trace if trace is not None else Trace()
        self.vms: dict[str, GuestVm] = {}
        self.npf_hooks: list[NpfHook] = []
        self.cpuid_exits = 0
        if cfg.snp_mode:
            machine.rmp = Rmp()

    # -- tracing ---------------------------------------------------------------

    def _op(self, op: str, vm: Optional[GuestVm], fld: str = "", old: Any = None, new: Any = None) -> None:
        self.trace.emit("HV_OP", op=op, vm=vm.vm_id if vm else None, field=fld, old=old, new=new)

    # -- lifecycle -------------------------------------------------------------

    def launch_vm(self, image: GuestImage, sev_class: "SevClass | str" = SevClass.SEV,
                  vm_id: Optional[str] = None) -> GuestVm:
        m = self.machine
        cls = SevClass.parse(sev_class)
        vm_id = vm_id or f"vm{len(self.vms)}"
        if vm_id in self.vms:
            raise SevSimError(f"duplicate vm id {vm_id}")
        asid = self.pools.allocate(cls, m.engine.pending_flush)
        encrypted = cls is not SevClass.NONE
        try:
            if encrypted:
                if asid in m.engine.pending_flush:
                    self.wbinvd()
                    self.df_flush()
                m.engine.activate(asid, vm_id)
        except SevSimError:
            self.pools.release(asid)
            raise

        backing: dict[int, int] = {}
        npt = Npt()
        for gpa, data in sorted(image.pages.items()):
            spfn = m.alloc_frame()
            backing[gpa >> 12] = spfn
            npt.map(gpa >> 12, spfn)
            sel = guest_key(asid) if encrypted and image.private.get(gpa, True) else PLAINTEXT
            m.firmware_write(spfn << 12, data, sel)
            if m.rmp is not None and encrypted:
                m.rmp.assign(spfn << 12, asid, gpa)
        ncr3 = m.alloc_frame() << 12
        m.npts[ncr3] = npt

        state = SaveState(rip=image.entry_rip, cr3=image.gcr3, idtr_base=image.idtr_base)
        for name, value in image.regs.items():
            state.set_reg(name, value)
        control = VmcbControl(asid=asid, sev=encrypted, sev_es=cls is SevClass.SEV_ES, ncr3=ncr3)
        vmcb = Vmcb(control, SaveState(rflags=0), spa=m.alloc_frame() << 12)
        vmsa_ptr = 0
        if cls is SevClass.SEV_ES:
            vmsa_ptr = m.alloc_frame() << 12
            control.vmsa_ptr = vmsa_ptr
            m.install_vmsa(vmsa_ptr, asid, state)
            if m.rmp is not None:
                m.rmp.assign(vmsa_ptr, asid, None)
        else:
            vmcb.save = state
        vm = GuestVm(vm_id, cls, asid, vmcb, npt, ncr3, backing, vmsa_ptr, ground_truth=image)
        self.vms[vm_id] = vm
        self._op("launch", vm, "asid", None, asid)
        return vm

    def teardown(self, vm: GuestVm) -> None:
        m = self.machine
        if vm.encrypted and m.engine.is_active(vm.asid):
            m.engine.deactivate(vm.asid)
        self.pools.release(vm.asid)
        m.npts.pop(vm.ncr3, None)
        m.tlb.flush_asid(vm.asid)
        self.vms.pop(vm.vm_id, None)
        self._op("teardown", vm, "asid", vm.asid, None)

    def wbinvd(self) -> None:
        self.machine.wbinvd()
        self._op("wbinvd", None)

    def df_flush(self) -> None:
        self.machine.engine.df_flush()
        self._op("df_flush", None)

    # -- running ---------------------------------------------------------------

    def run(self, vm: GuestVm, step_budget: Optional[int] = None) -> VmExit:
        if vm.crashed:
            raise VmCrashed(f"{vm.vm_id} is shut down")
        c = vm.vmcb.control
        self.trace.emit("VMRUN", vm=vm.vm_id, asid=c.asid, rip=None if c.sev_es else vm.vmcb.save.rip,
                        tlb_control=c.tlb_control)
        ex = self.machine.vmrun(vm.vmcb, step_budget)
        # the hypervisor marks everything clean again and drops one-shot flush requests
        c.clean_bits = CLEAN_ALL
        c.tlb_control = TLB_NOTHING
        if ex.code == EXIT_SHUTDOWN:
            vm.crashed = True
        self.trace.emit("VMEXIT", vm=vm.vm_id, exit=ex.name, exitinfo1=ex.exitinfo1, exitinfo2=ex.exitinfo2,
                        exitintinfo=ex.exitintinfo, retired=ex.retired)
        return ex

    def handle_exit(self, vm: GuestVm, ex: VmExit) -> Dispatch:
        if ex.code == EXIT_NPF:
            for hook in self.npf_hooks:
                action = hook(vm, ex)
                if action:
                    return Dispatch(action, ex)
            if ex.is_rmp_fault:
                return Dispatch("rmp_fault", ex, {"gpa": ex.exitinfo2})
            self._map_benign(vm, ex.exitinfo2)
            return Dispatch("mapped", ex, {"gpa": ex.exitinfo2 & ~PAGE_MASK})
        if ex.code == EXIT_CPUID:
            self.emulate_cpuid(vm)
            return Dispatch("emulated", ex)
        if ex.code == EXIT_SHUTDOWN:
            return Dispatch("crashed", ex)
        if ex.code == EXIT_INTR:
            return Dispatch("resumed", ex)
        return Dispatch("error", ex)

    def _map_benign(self, vm: GuestVm, gpa: int) -> None:
        gpfn = gpa >> 12
        e = vm.npt.entry(gpfn)
        if e is not None:
            e.present = True
        else:
            spfn = vm.backing.get(gpfn)
            if spfn is None:
                spfn = vm.backing[gpfn] = self.machine.alloc_frame()
            vm.npt.map(gpfn, spfn)
        vm.npt.flush_ntlb(gpfn)
        self._op("map", vm, "npt", None, gpfn)

    def emulate_cpuid(self, vm: GuestVm) -> None:
        self.cpuid_exits += 1
        if vm.vmcb.control.sev_es:
            return  # answered through the GHCB by the guest's own handler
        s = vm.vmcb.save
        cfg = self.machine.config
        leaf = s.regs[0] & 0xFFFFFFFF
        if leaf == CPUID_SEV_LEAF:
            s.regs[0], s.regs[3], s.regs[1], s.regs[2] = 0xF, 0, cfg.max_sev, cfg.min_sev_non_es
        elif leaf == CPUID_SVM_LEAF:
            s.regs[0], s.regs[3], s.regs[1], s.regs[2] = 1, cfg.max_all, 0, 0
        s.rip = vm.vmcb.control.nrip

    def run_until_exit(self, vm: GuestVm, want: Callable[[VmExit], bool], max_exits: int = 1000) -> VmExit:
        """Run with the default policy until ``want(exit)`` holds."""
        for _ in range(max_exits):
            ex = self.run(vm)
            if want(ex):
                return ex
            if self.handle_exit(vm, ex).action == "crashed":
                raise VmCrashed(f"{vm.vm_id} shut down")
        raise SevSimError(f"{vm.vm_id}: no matching exit within {max_exits}")

    # -- privileged knobs ------------------------------------------------------

    def clear_present_bits(self, vm: GuestVm) -> None:
        vm.npt.clear_present_all()
        vm.npt.flush_ntlb()
        self._op("clear_present_bits", vm, "npt.present", None, 0)

    def restore_present_bits(self, vm: GuestVm, present: Optional[dict[int, bool]] = None) -> None:
        for gpfn, e in vm.npt.entries.items():
            e.present = True if present is None else present.get(gpfn, e.present)
        vm.npt.flush_ntlb()
        self._op("restore_present_bits", vm, "npt.present", 0, None)

    def map_gpa(self, vm: GuestVm, gpa: int, spfn: int, nc: int = 0) -> None:
        gpfn = (gpa & ~PAGE_MASK) >> 12
        old = vm.npt.entry(gpfn)
        vm.npt.map(gpfn, spfn, nc)
        vm.npt.flush_ntlb(gpfn)
        self._op("map_gpa", vm, f"npt[{gpfn:#x}]", None if old is None else old.spfn, spfn)

    def unmap_all(self, vm: GuestVm) -> None:
        vm.npt.entries.clear()
        vm.npt.flush_ntlb()
        self._op("unmap_all", vm, "npt", None, None)

    def remap_gcr3(self, vm: GuestVm, target_spfn: int) -> None:
        """Point the nPT entry covering the guest's gCR3 at another frame."""
        gcr3 = vm.vmcb.save.cr3
        self.map_gpa(vm, gcr3, target_spfn)

    def set_asid(self, vm: GuestVm, asid: int) -> None:
        c = vm.vmcb.control
        old = c.asid
        c.asid = asid
        c.clean_bits &= ~CLEAN_ASID
        self._op("set_asid", vm, "asid", old, asid)

    def set_sev_bit(self, vm: GuestVm, sev_class: "SevClass | str") -> None:
        cls = SevClass.parse(sev_class)
        c = vm.vmcb.control
        old = (c.sev, c.sev_es)
        c.sev = cls is not SevClass.NONE
        c.sev_es = cls is SevClass.SEV_ES
        self._op("set_sev_bit", vm, "sev_ctl", list(old), [c.sev, c.sev_es])

    def set_rip(self, vm: GuestVm, rip: int) -> None:
        """Plain SEV: save-area RIP is authoritative; nRIP mirrors it."""
        s = vm.vmcb.save
        old = s.rip
        s.rip = rip
        vm.vmcb.control.nrip = rip
        self._op("set_rip", vm, "rip", old, rip)

    def set_regs(self, vm: GuestVm, **regs: int) -> None:
        for name, value in regs.items():
            old = vm.vmcb.save.reg(name)
            vm.vmcb.save.set_reg(name, value)
            self._op("set_reg", vm, name, old, value & ((1 << 64) - 1))

    def set_interrupt_flag(self, vm: GuestVm, enabled: bool) -> None:
        s = vm.vmcb.save
        old = s.rflags
        s.rflags = (s.rflags | RFLAGS_IF) if enabled else (s.rflags & ~RFLAGS_IF)
        self._op("set_rflags", vm, "rflags", old, s.rflags)

    def set_cr3(self, vm: GuestVm, gcr3: int) -> None:
        old = vm.vmcb.save.cr3
        vm.vmcb.save.cr3 = gcr3
        self._op("set_cr3", vm, "cr3", old, gcr3)

    def set_idtr(self, vm: GuestVm, base: int) -> None:
        old = vm.vmcb.save.idtr_base
        vm.vmcb.save.idtr_base = base
        self._op("set_idtr", vm, "idtr_base", old, base)

    def set_vmsa_ptr(self, vm: GuestVm, ptr: int) -> None:
        old = vm.vmcb.control.vmsa_ptr
        vm.vmcb.control.vmsa_ptr = ptr
        self._op("set_vmsa_ptr", vm, "vmsa_ptr", old, ptr)

    def request_tlb_flush(self, vm: GuestVm, mode: int = TLB_FLUSH_ASID) -> None:
        vm.vmcb.control.tlb_control = mode
        self._op("tlb_control", vm, "tlb_control", None, mode)

    def inject_virq(self, vm: GuestVm) -> None:
        vm.vmcb.control.v_irq = True
        self._op("inject_virq", vm, "v_irq", 0, 1)

    def clear_exitintinfo(self, vm: GuestVm) -> None:
        c = vm.vmcb.control
        old = c.exitintinfo
        c.exitintinfo = 0
        self._op("clear_exitintinfo", vm, "exitintinfo", old, 0)

    def snapshot(self, vm: GuestVm) -> bytes:
        return vm.vmcb.to_bytes()

    def rewind(self, vm: GuestVm, blob: bytes) -> None:
        vm.vmcb = Vmcb.from_bytes(blob, vm.vmcb.spa)
        vm.vmcb.control.clean_bits = 0   # restored fields must be reloaded
        vm.crashed = False
        self._op("rewind", vm, "vmcb", None, None)

    def revive(self, vm: GuestVm) -> None:
        """Allow another VMRUN of a VMCB whose state lives elsewhere (SEV-ES)."""
        vm.crashed = False
        self._op("revive", vm, "crashed", 1, 0)

    def capture_gcr3(self, vm: GuestVm) -> int:
        """First nested fault after clearing every present bit is the gCR3 read."""
        if vm.crashed:
            raise VmCrashed(f"{vm.vm_id} is shut down")
        present = {g: e.present for g, e in vm.npt.entries.items()}
        self.clear_present_bits(vm)
        self.request_tlb_flush(vm, TLB_FLUSH_ASID)
        try:
            ex = self.run(vm)
        finally:
            self.restore_present_bits(vm, present)
        if ex.code == EXIT_SHUTDOWN:
            raise VmCrashed(f"{vm.vm_id} shut down before touching memory")
        if ex.code != EXIT_NPF:
            raise SevSimError(f"expected a nested fault, got {ex.name}")
        return ex.exitinfo2 & ~PAGE_MASK
