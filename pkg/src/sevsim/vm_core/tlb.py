"""ASID-tagged TLB and a write-back cache tagged by (line, ASID, C-bit)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from ..crypto_engine import KeySelection

LINE = 64


@dataclass(frozen=True)
class TlbEntry:
    asid: int
    gva_page: int
    spa_page: int
    gc: int
    nc: int


class Tlb:
    def __init__(self) -> None:
        self._entries: dict[tuple[int, int], TlbEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[TlbEntry]:
        return iter(self._entries.values())

    def lookup(self, asid: int, gva: int) -> Optional[TlbEntry]:
        return self._entries.get((asid, gva & ~0xFFF))

    def insert(self, asid: int, gva: int, spa_page: int, gc: int, nc: int) -> TlbEntry:
        e = TlbEntry(asid, gva & ~0xFFF, spa_page & ~0xFFF, gc, nc)
        self._entries[(asid, e.gva_page)] = e
        return e

    def flush_asid(self, asid: int) -> None:
        for key in [k for k in self._entries if k[0] == asid]:
            del self._entries[key]

    def flush_all(self) -> None:
        self._entries.clear()


class CacheLine:
    __slots__ = ("spa_line", "asid", "cbit", "sel", "data", "dirty")

    def __init__(self, spa_line: int, asid: int, cbit: int, sel: KeySelection, data: bytearray):
        self.spa_line = spa_line
        self.asid = asid
        self.cbit = cbit
        self.sel = sel
        self.data = data
        self.dirty = False


# fill(spa_line, sel) -> 64 plaintext bytes ; spill(spa_line, sel, data)
Fill = Callable[[int, KeySelection], bytes]
Spill = Callable[[int, KeySelection, bytes], None]


class Cache:
    """Fully associative, no capacity eviction; only WBINVD empties it.

    The C-bit part of the tag is ``gC ^ nC`` of the access (callers pass it
    already folded), so (gC=1, nC=1) and (gC=0, nC=0) share a tag.
    """

    def __init__(self, fill: Fill, spill: Spill):
        self._lines: dict[tuple[int, int, int], CacheLine] = {}
        self._fill = fill
        self._spill = spill

    def __len__(self) -> int:
        return len(self._lines)

    def lines(self) -> Iterator[CacheLine]:
        return iter(self._lines.values())

    def probe(self, spa_line: int, asid: int, cbit: int) -> Optional[CacheLine]:
        return self._lines.get((spa_line, asid, cbit))

    def _line(self, spa_line: int, asid: int, cbit: int, sel: KeySelection) -> CacheLine:
        key = (spa_line, asid, cbit)
        line = self._lines.get(key)
        if line is None:
            line = CacheLine(spa_line, asid, cbit, sel, bytearray(self._fill(spa_line, sel)))
            self._lines[key] = line
        return line

    def read(self, spa: int, n: int, asid: int, cbit: int, sel: KeySelection) -> bytes:
        out = bytearray()
        while n:
            base = spa & ~(LINE - 1)
            off = spa - base
            take = min(n, LINE - off)
            out += self._line(base, asid, cbit, sel).data[off:off + take]
            spa += take
            n -= take
        return bytes(out)

    def write(self, spa: int, data: bytes, asid: int, cbit: int, sel: KeySelection) -> None:
        pos = 0
        while pos < len(data):
            base = spa & ~(LINE - 1)
            off = spa - base
            take = min(len(data) - pos, LINE - off)
            line = self._line(base, asid, cbit, sel)
            line.data[off:off + take] = data[pos:pos + take]
            line.dirty = True
            spa += take
            pos += take

    def wbinvd(self) -> int:
        """Write back dirty lines under their own key, then drop everything."""
        written = 0
        for line in self._lines.values():
            if line.dirty:
                self._spill(line.spa_line, line.sel, bytes(line.data))
                written += 1
        self._lines.clear()
        return written
