"""VMCB control area and save-state layout.

The control area occupies bytes 0x000-0x3FF of a VMCB page; the plain-SEV
save area starts at 0x400. A SEV-ES save area (VMSA) uses the same save-state
layout but lives in its own page, encrypted under the guest key.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

VMCB_SIZE = 0x1000
SAVE_OFFSET = 0x400
VMSA_SIZE = 0x1000

# control-area offsets
OFF_ASID = 0x058
OFF_TLB_CONTROL = 0x05C
OFF_VINTR = 0x060
OFF_EXITCODE = 0x070
OFF_EXITINFO1 = 0x078
OFF_EXITINFO2 = 0x080
OFF_EXITINTINFO = 0x088
OFF_SEV_CTL = 0x090
OFF_GHCB = 0x0A0
OFF_NCR3 = 0x0B0
OFF_CLEAN = 0x0C0
OFF_NRIP = 0x0C8
OFF_VMSA = 0x108

V_IRQ = 1 << 8
NP_ENABLE = 1 << 0
SEV_ENABLE = 1 << 1
SEV_ES_ENABLE = 1 << 2

CLEAN_ASID = 1 << 2
CLEAN_NP = 1 << 4
CLEAN_ALL = 0xFFFFFFFF

TLB_NOTHING = 0
TLB_FLUSH_ALL = 1
TLB_FLUSH_ASID = 3

EXITINTINFO_VALID = 1 << 31

RFLAGS_IF = 1 << 9
RFLAGS_RESERVED = 1 << 1

# save-state offsets (relative to the start of the save area)
SAVE_IDTR_BASE = 0x088
SAVE_CR3 = 0x150
SAVE_RFLAGS = 0x170
SAVE_RIP = 0x178
SAVE_RSP = 0x1D8
SAVE_RAX = 0x1F8
SAVE_CR2 = 0x240
_GPR_OFFSETS = {
    1: 0x308, 2: 0x310, 3: 0x318, 5: 0x328, 6: 0x330, 7: 0x338,
    **{8 + i: 0x340 + 8 * i for i in range(8)},
}

REG_NAMES = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
             "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
REG_INDEX = {n: i for i, n in enumerate(REG_NAMES)}

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
M64 = (1 << 64) - 1


def _put64(buf: bytearray, off: int, v: int) -> None:
    _U64.pack_into(buf, off, v & M64)


def _get64(buf: bytes, off: int) -> int:
    return _U64.unpack_from(buf, off)[0]


def _signed64(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


@dataclass
class SaveState:
    rip: int = 0
    cr3: int = 0
    rflags: int = RFLAGS_RESERVED | RFLAGS_IF
    idtr_base: int = 0
    cr2: int = 0
    regs: list[int] = field(default_factory=lambda: [0] * 16)

    def reg(self, name: str) -> int:
        return self.regs[REG_INDEX[name]]

    def set_reg(self, name: str, value: int) -> None:
        self.regs[REG_INDEX[name]] = value & M64

    def copy(self) -> "SaveState":
        return SaveState(self.rip, self.cr3, self.rflags, self.idtr_base, self.cr2, list(self.regs))

    def pack_into(self, buf: bytearray, base: int = 0) -> None:
        _put64(buf, base + SAVE_IDTR_BASE, self.idtr_base)
        _put64(buf, base + SAVE_CR3, self.cr3)
        _put64(buf, base + SAVE_RFLAGS, self.rflags)
        _put64(buf, base + SAVE_RIP, self.rip)
        _put64(buf, base + SAVE_RSP, self.regs[4])
        _put64(buf, base + SAVE_RAX, self.regs[0])
        _put64(buf, base + SAVE_CR2, self.cr2)
        for idx, off in _GPR_OFFSETS.items():
            _put64(buf, base + off, self.regs[idx])

    def to_bytes(self, size: int = VMSA_SIZE) -> bytes:
        buf = bytearray(size)
        self.pack_into(buf)
        return bytes(buf)

    @classmethod
    def unpack_from(cls, buf: bytes, base: int = 0) -> "SaveState":
        regs = [0] * 16
        regs[0] = _get64(buf, base + SAVE_RAX)
        regs[4] = _get64(buf, base + SAVE_RSP)
        for idx, off in _GPR_OFFSETS.items():
            regs[idx] = _get64(buf, base + off)
        return cls(
            rip=_get64(buf, base + SAVE_RIP),
            cr3=_get64(buf, base + SAVE_CR3),
            rflags=_get64(buf, base + SAVE_RFLAGS),
            idtr_base=_get64(buf, base + SAVE_IDTR_BASE),
            cr2=_get64(buf, base + SAVE_CR2),
            regs=regs,
        )

    def diff(self, other: "SaveState") -> set[str]:
        """Names of fields (and registers) that differ."""
        out = {f.name for f in fields(self) if f.name != "regs" and getattr(self, f.name) != getattr(other, f.name)}
        out |= {REG_NAMES[i] for i in range(16) if self.regs[i] != other.regs[i]}
        return out


@dataclass
class VmcbControl:
    asid: int = 0
    tlb_control: int = TLB_NOTHING
    v_irq: bool = False
    np_enable: bool = True
    sev: bool = False
    sev_es: bool = False
    ghcb_gpa: int = 0
    ncr3: int = 0
    clean_bits: int = 0
    nrip: int = 0
    vmsa_ptr: int = 0
    exitcode: int = 0
    exitinfo1: int = 0
    exitinfo2: int = 0
    exitintinfo: int = 0


@dataclass
class Vmcb:
    control: VmcbControl = field(default_factory=VmcbControl)
    save: SaveState = field(default_factory=SaveState)
    # where the VMCB page lives; keys the hardware's clean-bit state cache
    spa: int = field(default=0, compare=False)

    def to_bytes(self) -> bytes:
        c = self.control
        buf = bytearray(VMCB_SIZE)
        _U32.pack_into(buf, OFF_ASID, c.asid)
        buf[OFF_TLB_CONTROL] = c.tlb_control & 0xFF
        _put64(buf, OFF_VINTR, V_IRQ if c.v_irq else 0)
        _put64(buf, OFF_EXITCODE, c.exitcode)
        _put64(buf, OFF_EXITINFO1, c.exitinfo1)
        _put64(buf, OFF_EXITINFO2, c.exitinfo2)
        _put64(buf, OFF_EXITINTINFO, c.exitintinfo)
        sev_ctl = (NP_ENABLE if c.np_enable else 0) | (SEV_ENABLE if c.sev else 0) | (SEV_ES_ENABLE if c.sev_es else 0)
        _put64(buf, OFF_SEV_CTL, sev_ctl)
        _put64(buf, OFF_GHCB, c.ghcb_gpa)
        _put64(buf, OFF_NCR3, c.ncr3)
        _U32.pack_into(buf, OFF_CLEAN, c.clean_bits)
        _put64(buf, OFF_NRIP, c.nrip)
        _put64(buf, OFF_VMSA, c.vmsa_ptr)
        self.save.pack_into(buf, SAVE_OFFSET)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, blob: bytes, spa: int = 0) -> "Vmcb":
        if len(blob) != VMCB_SIZE:
            raise ValueError(f"VMCB blob must be {VMCB_SIZE} bytes")
        sev_ctl = _get64(blob, OFF_SEV_CTL)
        control = VmcbControl(
            asid=_U32.unpack_from(blob, OFF_ASID)[0],
            tlb_control=blob[OFF_TLB_CONTROL],
            v_irq=bool(_get64(blob, OFF_VINTR) & V_IRQ),
            np_enable=bool(sev_ctl & NP_ENABLE),
            sev=bool(sev_ctl & SEV_ENABLE),
            sev_es=bool(sev_ctl & SEV_ES_ENABLE),
            ghcb_gpa=_get64(blob, OFF_GHCB),
            ncr3=_get64(blob, OFF_NCR3),
            clean_bits=_U32.unpack_from(blob, OFF_CLEAN)[0],
            nrip=_get64(blob, OFF_NRIP),
            vmsa_ptr=_get64(blob, OFF_VMSA),
            exitcode=_signed64(_get64(blob, OFF_EXITCODE)),
            exitinfo1=_get64(blob, OFF_EXITINFO1),
            exitinfo2=_get64(blob, OFF_EXITINFO2),
            exitintinfo=_get64(blob, OFF_EXITINTINFO),
        )
        return cls(control, SaveState.unpack_from(blob, SAVE_OFFSET), spa)


def vmcb_snapshot(vmcb: Vmcb) -> bytes:
    return vmcb.to_bytes()


def vmcb_restore(blob: bytes, spa: int = 0) -> Vmcb:
    return Vmcb.from_bytes(blob, spa)
