"""Attack outputs. Every value here came from an exit record or a cleartext
register, never from a guest's ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Union

from ..paging import PAGE_SHIFT


class _Outcome:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name

    def __bool__(self) -> bool:
        return False


UNLEAKABLE = _Outcome("UNLEAKABLE")
RMP_BLOCKED = _Outcome("RMP_BLOCKED")


@dataclass(frozen=True)
class LeakedBlock:
    spa: int
    value: int          # reconstructed 64-bit block (unknown bits are 0)
    known_mask: int     # bits of ``value`` that are pinned down
    last_level: bool
    exit_step: int      # trace step of the VMEXIT that revealed it
    exitinfo2: int

    @property
    def pfn(self) -> int:
        return (self.value >> PAGE_SHIFT) & ((1 << 40) - 1)

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(8, "little")


BlockResult = Union[LeakedBlock, _Outcome]


@dataclass
class LeakReport:
    recovered: dict[int, BlockResult] = field(default_factory=dict)
    attempts: int = 0
    npf_count: int = 0
    triple_fault_count: int = 0
    vm_relaunch_count: int = 0
    rmp_fault_count: int = 0

    def record(self, spa: int, result: BlockResult) -> None:
        self.attempts += 1
        self.recovered[spa] = result

    @property
    def leaked(self) -> dict[int, LeakedBlock]:
        return {k: v for k, v in self.recovered.items() if isinstance(v, LeakedBlock)}

    @property
    def leaked_bytes(self) -> int:
        return 8 * len(self.leaked)

    def summary(self) -> dict[str, Any]:
        return {
            "attempts": self.attempts,
            "leaked_blocks": len(self.leaked),
            "leaked_bytes": self.leaked_bytes,
            "unleakable": sum(1 for v in self.recovered.values() if v is UNLEAKABLE),
            "npf_count": self.npf_count,
            "triple_fault_count": self.triple_fault_count,
            "vm_relaunch_count": self.vm_relaunch_count,
            "rmp_fault_count": self.rmp_fault_count,
        }


@dataclass
class OffsetCoverage:
    rounds: list[set[int]] = field(default_factory=list)

    def cumulative(self) -> list[float]:
        """Mean |union| over every N-subset of rounds, for N = 1..len(rounds)."""
        out = []
        r = len(self.rounds)
        for n in range(1, r + 1):
            sizes = [len(set().union(*combo)) for combo in combinations(self.rounds, n)]
            out.append(sum(sizes) / len(sizes))
        return out

    @property
    def total(self) -> int:
        return len(set().union(*self.rounds)) if self.rounds else 0
