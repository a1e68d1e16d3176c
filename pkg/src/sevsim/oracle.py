"""Ground-truth reads for assertions. Every call is counted in
``machine.audit`` so tests can prove an attack phase never used one."""

from __future__ import annotations

from .crypto_engine import PLAINTEXT, guest_key
from .hypervisor.core import GuestVm
from .paging import PAGE_MASK, PAGE_SIZE
from .vm_core.machine import Machine
from .vm_core.vmcb import SaveState


def read_spa(m: Machine, vm: GuestVm, spa: int, n: int, private: bool = True) -> bytes:
    if vm.encrypted and private:
        return m.oracle_read(spa, n, guest_key(vm.asid), vm.asid, 1)
    return m.oracle_read(spa, n, PLAINTEXT, vm.asid, 0)


def read_gpa(m: Machine, vm: GuestVm, gpa: int, n: int) -> bytes:
    out = bytearray()
    while n:
        off = gpa & PAGE_MASK
        take = min(n, PAGE_SIZE - off)
        private = vm.ground_truth.private.get(gpa - off, True)
        out += read_spa(m, vm, vm.spa_of(gpa), take, private)
        gpa += take
        n -= take
    return bytes(out)


def read_gva(m: Machine, vm: GuestVm, gva: int, n: int) -> bytes:
    out = bytearray()
    while n:
        off = gva & PAGE_MASK
        take = min(n, PAGE_SIZE - off)
        out += read_gpa(m, vm, vm.ground_truth.translate(gva), take)
        gva += take
        n -= take
    return bytes(out)


def qword_at_spa(m: Machine, vm: GuestVm, spa: int) -> int:
    return int.from_bytes(read_spa(m, vm, spa, 8), "little")


def registers(m: Machine, vm: GuestVm) -> SaveState:
    if vm.vmcb.control.sev_es:
        return m.oracle_vmsa(vm.vmsa_ptr, vm.asid)
    m.audit["oracle_regs"] += 1
    return vm.vmcb.save.copy()
