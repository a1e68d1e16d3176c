"""Reverse map table: per-system-page owner ASID and guest-physical address."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..errors import NestedPageFault

PAGE_MASK = 0xFFF


@dataclass(frozen=True)
class RmpEntry:
    asid: int
    gpa: Optional[int]   # None for a VMSA page
    validated: bool = True


class Rmp:
    def __init__(self) -> None:
        self.entries: dict[int, RmpEntry] = {}

    def assign(self, spa: int, asid: int, gpa: Optional[int]) -> None:
        """Assign + validate in one step (the guest's own launch-time PVALIDATE)."""
        self.entries[spa >> 12] = RmpEntry(asid, None if gpa is None else gpa & ~PAGE_MASK)

    def check(self, spa: int, asid: int, gpa: int) -> None:
        """Both the owner ASID and the recorded gPA must match."""
        e = self.entries.get(spa >> 12)
        if e is None or not e.validated or e.asid != asid or e.gpa != gpa & ~PAGE_MASK:
            raise NestedPageFault(gpa, rmp=True)

    def check_vmsa(self, spa: int, asid: int) -> bool:
        e = self.entries.get(spa >> 12)
        return e is not None and e.gpa is None and e.asid == asid
