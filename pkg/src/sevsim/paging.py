"""Guest/nested page tables, the two-dimensional walk, and the helpers used to
turn a nested-page-fault address back into the bytes that produced it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Union

from .crypto_engine import CBIT, PA_MASK, select_key
from .errors import GuestPageFault, NestedPageFault, NonCanonicalAddress, NotLeakable, UnalignedOffset

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1
ENTRIES = 512
LEVELS = 4

PTE_P = 1 << 0
PTE_RW = 1 << 1
PTE_US = 1 << 2
PTE_A = 1 << 5
PTE_D = 1 << 6
PTE_PS = 1 << 7
PTE_G = 1 << 8
PTE_NX = 1 << 63
PTE_CBIT = CBIT
PFN_MASK = ((1 << 52) - 1) & ~PAGE_MASK          # bits 51:12
RESERVED_MASK = ((1 << 63) - 1) & ~((1 << 48) - 1)  # bits 62:48
PFN_CBIT = 1 << (47 - PAGE_SHIFT)                 # C-bit seen inside a pfn

NRIP_STRIDE = 0x8000000000   # one top-level slot (bit 39)
KERNEL_HALF = 0xFFFF000000000000

Block = Union[bytes, bytearray, int]


def _as_int(block: Block) -> int:
    if isinstance(block, int):
        return block
    if len(block) != 8:
        raise ValueError("a PTE-sized block is 8 bytes")
    return int.from_bytes(block, "little")


def is_canonical(gva: int) -> bool:
    top = gva >> 47
    return top == 0 or top == 0x1FFFF


def canonical(va48: int) -> int:
    va48 &= (1 << 48) - 1
    return va48 | KERNEL_HALF if va48 >> 47 else va48


def va_indices(gva: int) -> tuple[int, int, int, int]:
    """(level4, level3, level2, level1) table indices of a virtual address."""
    return tuple((gva >> (PAGE_SHIFT + 9 * (lvl - 1))) & 0x1FF for lvl in (4, 3, 2, 1))


def gva_from_indices(i4: int, i3: int, i2: int, i1: int, offset: int = 0) -> int:
    return canonical((i4 << 39) | (i3 << 30) | (i2 << 21) | (i1 << 12) | offset)


@dataclass(frozen=True)
class Pte:
    raw: int

    @property
    def present(self) -> bool:
        return bool(self.raw & PTE_P)

    @property
    def ps(self) -> bool:
        return bool(self.raw & PTE_PS)

    @property
    def g(self) -> bool:
        return bool(self.raw & PTE_G)

    @property
    def cbit(self) -> int:
        return (self.raw >> 47) & 1

    @property
    def pfn(self) -> int:
        return (self.raw & PFN_MASK) >> PAGE_SHIFT

    @property
    def reserved_48_62(self) -> int:
        return (self.raw & RESERVED_MASK) >> 48

    @property
    def gpa(self) -> int:
        """Next-level guest-physical address with the C-bit stripped."""
        return self.raw & PFN_MASK & ~CBIT


def make_pte(pfn: int, flags: int = PTE_P | PTE_RW | PTE_US, cbit: bool = True) -> int:
    raw = ((pfn << PAGE_SHIFT) & PFN_MASK) | flags
    if cbit:
        raw |= PTE_CBIT
    return raw


def pte_is_leakable(block: Block, last_level: bool = False) -> bool:
    """Would this 8-byte value survive a walk as a present page-table entry?

    Bit 0 set and bits 62:48 clear; above the last level PS and G must be
    clear too.
    """
    v = _as_int(block)
    if not v & PTE_P or v & RESERVED_MASK:
        return False
    if not last_level and v & (PTE_PS | PTE_G):
        return False
    return True


def decode_leaked_gpa(block: Block, last_level: bool = True) -> int:
    """pfn field (bits 51:12) of a leakable block, C-bit cleared."""
    v = _as_int(block)
    if not pte_is_leakable(v, last_level):
        raise NotLeakable(f"{v:#018x} is not in PTE format")
    return ((v & PFN_MASK) >> PAGE_SHIFT) & ~PFN_CBIT


def pfn_from_fault(gpa: int) -> int:
    """What a nested fault on ``gpa`` reveals about the entry that produced it."""
    return ((gpa & PFN_MASK) >> PAGE_SHIFT) & ~PFN_CBIT


def leaked_known_mask(last_level: bool) -> int:
    """Bits of the original block a successful leak pins down."""
    mask = (PFN_MASK & ~CBIT) | PTE_P | RESERVED_MASK
    if not last_level:
        mask |= PTE_PS | PTE_G
    return mask


def choose_nrip(target_offset: int) -> int:
    """Resume address whose top-level index selects ``target_offset``."""
    if target_offset % 8 or not 0 <= target_offset < PAGE_SIZE:
        raise UnalignedOffset(f"offset {target_offset:#x} must be 8-aligned inside a page")
    slot = target_offset // 8
    if target_offset < 0x800:
        nrip = NRIP_STRIDE * slot
    else:
        nrip = KERNEL_HALF + NRIP_STRIDE * slot
    assert (nrip >> 39) & 0x1FF == slot and is_canonical(nrip)
    return nrip


# -- nested paging -------------------------------------------------------------

@dataclass
class NptEntry:
    present: bool
    spfn: int
    nc: int = 0


@dataclass
class Npt:
    """Hypervisor-owned gPFN -> sPFN map with an nTLB that needs explicit flushes."""

    entries: dict[int, NptEntry] = field(default_factory=dict)
    ntlb: dict[int, tuple[int, int]] = field(default_factory=dict)

    def map(self, gpfn: int, spfn: int, nc: int = 0, present: bool = True) -> None:
        self.entries[gpfn] = NptEntry(present, spfn, nc)

    def entry(self, gpfn: int) -> Optional[NptEntry]:
        return self.entries.get(gpfn)

    def clear_present_all(self) -> None:
        for e in self.entries.values():
            e.present = False

    def flush_ntlb(self, gpfn: Optional[int] = None) -> None:
        if gpfn is None:
            self.ntlb.clear()
        else:
            self.ntlb.pop(gpfn, None)

    def copy(self) -> "Npt":
        return Npt({k: NptEntry(e.present, e.spfn, e.nc) for k, e in self.entries.items()})


RmpCheck = Callable[[int, int, int], None]


def nested_translate(gpa: int, npt: Npt, asid: int = 0, rmp_check: Optional[RmpCheck] = None) -> tuple[int, int]:
    """gPA -> (sPA, nC). Raises NestedPageFault carrying ``gpa`` on a miss."""
    gpa &= PA_MASK & ~CBIT
    gpfn = gpa >> PAGE_SHIFT
    hit = npt.ntlb.get(gpfn)
    if hit is None:
        e = npt.entries.get(gpfn)
        if e is None or not e.present:
            raise NestedPageFault(gpa)
        hit = (e.spfn, e.nc)
        npt.ntlb[gpfn] = hit
    spa = (hit[0] << PAGE_SHIFT) | (gpa & PAGE_MASK)
    if rmp_check is not None:
        rmp_check(spa, asid, gpa)
    return spa, hit[1]


# -- guest walk ----------------------------------------------------------------

class WalkMemory(Protocol):
    def read_qword(self, spa: int, sel, ctag: int) -> int: ...


@dataclass
class WalkContext:
    gcr3: int
    asid: int
    npt: Npt
    encrypted: bool = True
    ncr3: int = 0
    level_count: int = LEVELS
    rmp_check: Optional[RmpCheck] = None


@dataclass(frozen=True)
class WalkResult:
    spa_page: int
    gpa_page: int
    gc: int
    nc: int


def guest_walk(gva: int, ctx: WalkContext, mem: WalkMemory) -> WalkResult:
    """Four guest levels, each table gPA itself translated through the nPT.

    Table entries are fetched as guest-private data (``forced_private``) and
    validated with the same predicate that decides leakability, so an entry
    decrypted under the wrong key usually ends the walk in a guest #PF.
    """
    if not is_canonical(gva):
        raise NonCanonicalAddress(f"{gva:#x}")
    table = ctx.gcr3 & PFN_MASK & ~CBIT
    gc = 1
    for level in range(ctx.level_count, 0, -1):
        idx = (gva >> (PAGE_SHIFT + 9 * (level - 1))) & 0x1FF
        entry_gpa = table + idx * 8
        spa, nc = nested_translate(entry_gpa, ctx.npt, ctx.asid, ctx.rmp_check)
        if ctx.encrypted:
            sel = select_key(1, nc, ctx.asid, forced_private=True)
            raw = mem.read_qword(spa, sel, 1 ^ nc)
        else:
            sel = select_key(0, nc, ctx.asid)
            raw = mem.read_qword(spa, sel, nc)
        if not pte_is_leakable(raw, last_level=level == 1):
            raise GuestPageFault(gva, f"level {level} entry {raw:#018x}")
        gc = (raw >> 47) & 1
        table = raw & PFN_MASK & ~CBIT
    leaf_gpa = table | (gva & PAGE_MASK)
    spa, nc = nested_translate(leaf_gpa, ctx.npt, ctx.asid, ctx.rmp_check)
    return WalkResult(spa & ~PAGE_MASK, table, gc if ctx.encrypted else 0, nc)
