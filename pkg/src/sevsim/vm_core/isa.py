"""The handful of x86-64 encodings momentary execution needs.

Supported: MOV imm32 -> r32 (B8+r), MOV r64 <- [r64] (REX.W 8B /r, mod=00),
MOV [r64] <- r64 (REX.W 89 /r, mod=00), CPUID (0F A2), JMP rel8 (EB).
Everything else is #UD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..errors import UndefinedInstruction
from .vmcb import REG_NAMES

ByteAt = Callable[[int], int]

MOV_IMM = "mov_imm32"
LOAD = "load64"
STORE = "store64"
CPUID = "cpuid"
JMP = "jmp_rel8"


@dataclass(frozen=True)
class Insn:
    op: str
    length: int
    reg: int = 0      # destination (MOV imm / load) or source (store)
    base: int = 0     # address register for memory forms
    imm: int = 0

    def __str__(self) -> str:
        if self.op == MOV_IMM:
            return f"mov ${self.imm:#x},%{REG_NAMES[self.reg]}d"
        if self.op == LOAD:
            return f"mov (%{REG_NAMES[self.base]}),%{REG_NAMES[self.reg]}"
        if self.op == STORE:
            return f"mov %{REG_NAMES[self.reg]},(%{REG_NAMES[self.base]})"
        if self.op == JMP:
            return f"jmp {self.imm:+d}"
        return "cpuid"


def _modrm_mem(byte_at: ByteAt, pos: int, rex_r: int, rex_b: int, rip: int, raw: bytes) -> tuple[int, int, int]:
    """Decode a mod=00 ModRM (+SIB) memory operand -> (reg, base, new_pos)."""
    modrm = byte_at(pos)
    pos += 1
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    if mod != 0 or rm == 5:
        raise UndefinedInstruction(rip, raw + bytes([modrm]))
    if rm == 4:
        sib = byte_at(pos)
        pos += 1
        index, base = (sib >> 3) & 7, sib & 7
        if index != 4 or base == 5:
            raise UndefinedInstruction(rip, raw + bytes([modrm, sib]))
        rm = base
    return reg | (rex_r << 3), rm | (rex_b << 3), pos


def decode(byte_at: ByteAt, rip: int = 0) -> Insn:
    """Decode one instruction; ``byte_at(i)`` returns the byte at rip+i."""
    pos = 0
    b = byte_at(pos)
    rex = 0
    if 0x40 <= b <= 0x4F:
        rex = b
        pos += 1
        b = byte_at(pos)
    w, r, x, rb = (rex >> 3) & 1, (rex >> 2) & 1, (rex >> 1) & 1, rex & 1
    raw = bytes([rex, b]) if rex else bytes([b])
    pos += 1
    if 0xB8 <= b <= 0xBF and not w:
        imm = sum(byte_at(pos + i) << (8 * i) for i in range(4))
        return Insn(MOV_IMM, pos + 4, reg=(b - 0xB8) | (rb << 3), imm=imm)
    if b in (0x8B, 0x89) and w and not x:
        reg, base, pos = _modrm_mem(byte_at, pos, r, rb, rip, raw)
        return Insn(LOAD if b == 0x8B else STORE, pos, reg=reg, base=base)
    if b == 0x0F and not rex:
        b2 = byte_at(pos)
        if b2 == 0xA2:
            return Insn(CPUID, pos + 1)
        raise UndefinedInstruction(rip, raw + bytes([b2]))
    if b == 0xEB and not rex:
        rel = byte_at(pos)
        return Insn(JMP, pos + 1, imm=rel - 0x100 if rel & 0x80 else rel)
    raise UndefinedInstruction(rip, raw)


def decode_bytes(code: bytes, rip: int = 0) -> Insn:
    def byte_at(i: int) -> int:
        if i >= len(code):
            raise UndefinedInstruction(rip, code)
        return code[i]
    return decode(byte_at, rip)


# -- assembler helpers used by image builders and tests ------------------------

def asm_mov_imm32(reg: str, imm: int) -> bytes:
    idx = REG_NAMES.index(reg)
    prefix = b"\x41" if idx >= 8 else b""
    return prefix + bytes([0xB8 + (idx & 7)]) + (imm & 0xFFFFFFFF).to_bytes(4, "little")


def _mem_operand(reg: int, base: int) -> bytes:
    modrm = ((reg & 7) << 3) | (base & 7)
    return bytes([modrm, 0x24]) if base & 7 == 4 else bytes([modrm])


def asm_load(dst: str, base: str) -> bytes:
    d, b = REG_NAMES.index(dst), REG_NAMES.index(base)
    rex = 0x48 | ((d >> 3) << 2) | (b >> 3)
    return bytes([rex, 0x8B]) + _mem_operand(d, b)


def asm_store(base: str, src: str) -> bytes:
    s, b = REG_NAMES.index(src), REG_NAMES.index(base)
    rex = 0x48 | ((s >> 3) << 2) | (b >> 3)
    return bytes([rex, 0x89]) + _mem_operand(s, b)


ASM_CPUID = b"\x0f\xa2"


def asm_jmp(rel: int) -> bytes:
    return bytes([0xEB, rel & 0xFF])
