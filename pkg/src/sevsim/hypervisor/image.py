"""Guest memory images: a plaintext page set plus the guest page table that
maps it, built before launch and kept afterwards as the test oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..paging import (
    PAGE_MASK,
    PAGE_SIZE,
    PFN_MASK,
    PTE_A,
    PTE_CBIT,
    PTE_D,
    PTE_G,
    PTE_NX,
    PTE_P,
    PTE_RW,
    PTE_US,
    is_canonical,
    make_pte,
    va_indices,
)

TABLE_FLAGS = PTE_P | PTE_RW | PTE_US | PTE_A
LEAF_FLAGS = PTE_P | PTE_RW | PTE_A | PTE_D

GATE_SELECTOR = 0x10
GATE_ATTR = 0x8E


def idt_gate(handler: int) -> bytes:
    return (
        (handler & 0xFFFF).to_bytes(2, "little")
        + GATE_SELECTOR.to_bytes(2, "little")
        + bytes([0, GATE_ATTR])
        + ((handler >> 16) & 0xFFFF).to_bytes(2, "little")
        + ((handler >> 32) & 0xFFFFFFFF).to_bytes(4, "little")
        + bytes(4)
    )


@dataclass
class GuestImage:
    pages: dict[int, bytes]            # gPA page -> plaintext
    private: dict[int, bool]           # gPA page -> C-bit set in its mapping
    gcr3: int
    mappings: dict[int, int]           # gVA page -> gPA page
    tables: dict[int, int]             # table gPA -> level (4 = root)
    entry_rip: int
    idtr_base: int = 0
    regs: dict[str, int] = field(default_factory=dict)
    symbols: dict[str, int] = field(default_factory=dict)

    def gpt_tree(self) -> dict[int, dict[int, int]]:
        """Present entries of every table: {table gPA: {index: next pfn}}."""
        tree: dict[int, dict[int, int]] = {}
        for gpa in self.tables:
            page = self.pages[gpa]
            entries = {}
            for i in range(512):
                raw = int.from_bytes(page[i * 8:i * 8 + 8], "little")
                if raw & PTE_P:
                    entries[i] = (raw & PFN_MASK & ~PTE_CBIT) >> 12
            tree[gpa] = entries
        return tree

    def translate(self, gva: int) -> int:
        return self.mappings[gva & ~PAGE_MASK] | (gva & PAGE_MASK)

    def read(self, gva: int, n: int) -> bytes:
        out = bytearray()
        while n:
            off = gva & PAGE_MASK
            take = min(n, PAGE_SIZE - off)
            out += self.pages[self.mappings[gva - off]][off:off + take]
            gva += take
            n -= take
        return bytes(out)

    def table_path(self, gva: int) -> list[int]:
        """gPAs of the four tables a walk of ``gva`` reads, root first."""
        path = [self.gcr3]
        for level, idx in zip((4, 3, 2), va_indices(gva)[:3]):
            raw = int.from_bytes(self.pages[path[-1]][idx * 8:idx * 8 + 8], "little")
            path.append(raw & PFN_MASK & ~PTE_CBIT)
        return path

    def data_pages(self) -> list[int]:
        return [g for g in self.pages if g not in self.tables]


class ImageBuilder:
    """Allocates gPAs sequentially and grows a 4-level table on demand."""

    def __init__(self, gpa_base: int = 0x100000):
        self._next = gpa_base & ~PAGE_MASK
        self.pages: dict[int, bytearray] = {}
        self.private: dict[int, bool] = {}
        self.tables: dict[int, int] = {}
        self.mappings: dict[int, int] = {}
        self.symbols: dict[str, int] = {}
        self.root = self._new_table(4)

    def _alloc(self, private: bool = True) -> int:
        gpa = self._next
        self._next += PAGE_SIZE
        self.pages[gpa] = bytearray(PAGE_SIZE)
        self.private[gpa] = private
        return gpa

    def _new_table(self, level: int) -> int:
        gpa = self._alloc(True)
        self.tables[gpa] = level
        return gpa

    @staticmethod
    def _get(page: bytearray, idx: int) -> int:
        return int.from_bytes(page[idx * 8:idx * 8 + 8], "little")

    @staticmethod
    def _set(page: bytearray, idx: int, raw: int) -> None:
        page[idx * 8:idx * 8 + 8] = raw.to_bytes(8, "little")

    def map_page(self, gva: int, data: bytes = b"", *, private: bool = True, user: bool = True,
                 glob: bool = False, nx: bool = False, gpa: Optional[int] = None) -> int:
        if not is_canonical(gva):
            raise ValueError(f"non-canonical gVA {gva:#x}")
        gva &= ~PAGE_MASK
        if gva in self.mappings:
            raise ValueError(f"gVA {gva:#x} already mapped")
        table = self.root
        for level, idx in zip((4, 3, 2), va_indices(gva)[:3]):
            raw = self._get(self.pages[table], idx)
            if not raw & PTE_P:
                nxt = self._new_table(level - 1)
                self._set(self.pages[table], idx, make_pte(nxt >> 12, TABLE_FLAGS, cbit=True))
                table = nxt
            else:
                table = raw & PFN_MASK & ~PTE_CBIT
        if gpa is None:
            gpa = self._alloc(private)
        flags = LEAF_FLAGS | (PTE_US if user else 0) | (PTE_G if glob else 0) | (PTE_NX if nx else 0)
        self._set(self.pages[table], va_indices(gva)[3], make_pte(gpa >> 12, flags, cbit=private))
        self.mappings[gva] = gpa
        if data:
            self.write(gva, data)
        return gpa

    def write(self, gva: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            off = gva & PAGE_MASK
            take = min(len(data) - pos, PAGE_SIZE - off)
            self.pages[self.mappings[gva - off]][off:off + take] = data[pos:pos + take]
            gva += take
            pos += take

    def map_region(self, gva: int, data: bytes, **kw) -> list[int]:
        npages = max(1, -(-len(data) // PAGE_SIZE))
        gpas = [self.map_page(gva + i * PAGE_SIZE, **kw) for i in range(npages)]
        self.write(gva, data)
        return gpas

    def set_idt(self, idt_gva: int, handler: int) -> None:
        self.map_page(idt_gva, idt_gate(handler) * 256, user=False, glob=True, nx=True)

    def build(self, entry_rip: int, idtr_base: int = 0, regs: Optional[dict[str, int]] = None) -> GuestImage:
        return GuestImage(
            pages={g: bytes(p) for g, p in self.pages.items()},
            private=dict(self.private),
            gcr3=self.root,
            mappings=dict(self.mappings),
            tables=dict(self.tables),
            entry_rip=entry_rip,
            idtr_base=idtr_base,
            regs=dict(regs or {}),
            symbols=dict(self.symbols),
        )
