"""Static scans of raw binaries: how many 8-byte aligned blocks would pass as
page-table entries, and where given byte patterns occur."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import InputTooShort
from .paging import PTE_G, PTE_P, PTE_PS, RESERVED_MASK

Pattern = Union[bytes, str]

DEFAULT_PATTERNS: dict[str, str] = {
    "load_rbx_rax": "48 8b 03",        # mov (%rbx),%rax
    "store_rax_r12": "49 89 04 24",    # mov %rax,(%r12)
}


@dataclass(frozen=True)
class GadgetHit:
    offset: int
    pattern_id: str


@dataclass
class ScanReport:
    file_id: str
    total_blocks: int
    leakable_blocks: int
    last_level: bool
    leakable_offsets: list[int] = field(default_factory=list)
    gadget_hits: list[GadgetHit] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.leakable_blocks / self.total_blocks if self.total_blocks else 0.0

    def to_record(self) -> dict:
        return {
            "file": self.file_id,
            "total_blocks": self.total_blocks,
            "leakable_blocks": self.leakable_blocks,
            "fraction": self.fraction,
            "last_level": self.last_level,
            "leakable_offsets": list(self.leakable_offsets),
            "gadget_hits": [{"offset": h.offset, "pattern": h.pattern_id} for h in self.gadget_hits],
        }


def leakable_mask(data: bytes, last_level: bool = False) -> np.ndarray:
    """Boolean array, one entry per whole 8-byte block of ``data``."""
    n = len(data) // 8
    v = np.frombuffer(data, dtype="<u8", count=n)
    ok = (v & np.uint64(PTE_P)) != 0
    ok &= (v & np.uint64(RESERVED_MASK)) == 0
    if not last_level:
        ok &= (v & np.uint64(PTE_PS | PTE_G)) == 0
    return ok


def scan_pte_fraction(data: bytes, last_level: bool = False, file_id: str = "<bytes>") -> ScanReport:
    if len(data) < 8:
        raise InputTooShort(f"{file_id}: {len(data)} bytes, need at least 8")
    ok = leakable_mask(data, last_level)
    offsets = (np.flatnonzero(ok) * 8).tolist()
    return ScanReport(file_id, int(ok.size), len(offsets), last_level, offsets)


def _compile(pattern: Pattern) -> re.Pattern:
    if isinstance(pattern, (bytes, bytearray)):
        body = re.escape(bytes(pattern))
    else:
        tokens = pattern.replace(" ", "").lower()
        if len(tokens) % 2:
            raise ValueError(f"odd-length hex pattern {pattern!r}")
        parts = []
        for i in range(0, len(tokens), 2):
            t = tokens[i:i + 2]
            parts.append(b"." if t == "??" else re.escape(bytes.fromhex(t)))
        body = b"".join(parts)
    if not body:
        raise ValueError("empty pattern")
    # lookahead so overlapping occurrences are all reported
    return re.compile(b"(?=" + body + b")", re.DOTALL)


def _named(patterns: Union[Mapping[str, Pattern], Iterable[Pattern]]) -> list[tuple[str, Pattern]]:
    if isinstance(patterns, Mapping):
        return list(patterns.items())
    out = []
    for p in patterns:
        out.append((p.hex() if isinstance(p, (bytes, bytearray)) else p.replace(" ", "").lower(), p))
    return out


def gadget_hits(data: bytes, patterns: Union[Mapping[str, Pattern], Iterable[Pattern]]) -> list[GadgetHit]:
    hits = []
    for pid, p in _named(patterns):
        rx = _compile(p)
        hits.extend(GadgetHit(m.start(), pid) for m in rx.finditer(data))
    hits.sort(key=lambda h: (h.offset, h.pattern_id))
    return hits


def scan_gadgets(data: bytes, patterns: Union[Mapping[str, Pattern], Iterable[Pattern]]) -> list[int]:
    """Ascending offsets at which any pattern matches (``??`` matches any byte)."""
    return sorted({h.offset for h in gadget_hits(data, patterns)})
