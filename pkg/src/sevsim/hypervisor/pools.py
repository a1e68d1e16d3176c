"""ASID pools derived from the (simulated) CPUID leaves."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from ..errors import IllegalAsidRange, PoolExhausted


class SevClass(str, Enum):
    NONE = "none"
    SEV = "sev"
    SEV_ES = "sev_es"

    @classmethod
    def parse(cls, value: "str | SevClass | None") -> "SevClass":
        if value is None:
            return cls.NONE
        if isinstance(value, cls):
            return value
        norm = str(value).lower().replace("-", "_")
        if norm in ("non_sev", "plain", ""):
            return cls.NONE
        return cls(norm)


@dataclass
class AsidPools:
    max_all: int = 32768
    max_sev: int = 15
    min_sev_non_es: int = 5
    in_use: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not 1 <= self.min_sev_non_es <= self.max_sev + 1 <= self.max_all:
            raise IllegalAsidRange("inconsistent CPUID ASID limits")

    def range_for(self, cls: SevClass) -> range:
        if cls is SevClass.SEV_ES:
            return range(1, self.min_sev_non_es)
        if cls is SevClass.SEV:
            return range(self.min_sev_non_es, self.max_sev + 1)
        return range(self.max_sev + 1, self.max_all + 1)

    def allocate(self, cls: SevClass, dirty: Iterable[int] = ()) -> int:
        """Lowest free ASID of the class; ones awaiting a flush come last."""
        dirty = set(dirty)
        free = [a for a in self.range_for(cls) if a not in self.in_use]
        if not free:
            raise PoolExhausted(f"no free {cls.value} ASID")
        clean = [a for a in free if a not in dirty]
        asid = (clean or free)[0]
        self.in_use.add(asid)
        return asid

    def release(self, asid: int) -> None:
        self.in_use.discard(asid)
