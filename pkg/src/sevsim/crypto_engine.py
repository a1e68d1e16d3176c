"""Secure-processor model: VEK store, ACTIVATE/DEACTIVATE lifecycle and the
address-tweaked block cipher applied to every memory transfer.

A 16-byte block ``m`` at system physical address ``A`` is stored as
``E_K(m ^ T(A))`` where ``T(A)`` XORs one 128-bit constant per set address
bit. ``E_K`` is AES-128 in single-block (ECB) mode.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    AsidAlreadyActive,
    DfflushRequired,
    IllegalAsidRange,
    UnknownAsid,
    WbinvdRequired,
)

PA_BITS = 48
PA_MASK = (1 << PA_BITS) - 1
CBIT_SHIFT = 47
CBIT = 1 << CBIT_SHIFT
BLOCK = 16
PAGE = 0x1000

HOST_ASID = 0


def strip_cbit(addr: int) -> int:
    return addr & PA_MASK & ~CBIT


class TweakTable:
    """Seeded per-bit tweak constants; ``t[i]`` belongs to address bit ``i``."""

    def __init__(self, seed: int, bits: int = PA_BITS):
        self.seed = seed
        self.bits = bits
        rng = random.Random(seed)
        self.t = [rng.getrandbits(128) for _ in range(bits)]
        # tweak of every 16-byte block offset inside a page; page bases and
        # in-page offsets have disjoint bits so T(base + off) = T(base) ^ T(off)
        self._in_page = [self.tweak(j * BLOCK) for j in range(PAGE // BLOCK)]
        self._in_page_int = int.from_bytes(b"".join(t.to_bytes(BLOCK, "big") for t in self._in_page), "big")
        self._page_memo: dict[int, int] = {}

    def tweak(self, addr: int) -> int:
        if addr < 0 or addr >> self.bits:
            raise ValueError(f"address {addr:#x} exceeds {self.bits}-bit physical space")
        acc = 0
        i = 0
        while addr:
            if addr & 1:
                acc ^= self.t[i]
            addr >>= 1
            i += 1
        return acc

    def _page_tweak(self, page_base: int) -> int:
        t = self._page_memo.get(page_base)
        if t is None:
            t = self.tweak(page_base)
            if len(self._page_memo) < 1 << 16:
                self._page_memo[page_base] = t
        return t

    def stream(self, addr: int, nblocks: int) -> bytes:
        """Concatenated tweaks for ``nblocks`` consecutive blocks at ``addr``."""
        out = bytearray()
        while nblocks:
            base = addr & ~(PAGE - 1)
            first = (addr - base) // BLOCK
            n = min(nblocks, PAGE // BLOCK - first)
            # tweak of a run inside one page: repeat T(base), XOR the in-page run
            rep = int.from_bytes(self._page_tweak(base).to_bytes(BLOCK, "big") * n, "big")
            shift = (PAGE // BLOCK - first - n) * BLOCK * 8
            run = (self._in_page_int >> shift) & ((1 << (n * BLOCK * 8)) - 1)
            out += (rep ^ run).to_bytes(n * BLOCK, "big")
            addr += n * BLOCK
            nblocks -= n
        return bytes(out)


@dataclass(frozen=True)
class KeySelection:
    """Which key a memory access is transformed with."""

    kind: str  # "plaintext" | "host" | "guest"
    asid: Optional[int] = None

    def __str__(self) -> str:
        if self.kind == "guest":
            return f"GuestKey({self.asid})"
        return {"plaintext": "Plaintext", "host": "HostKey"}[self.kind]


PLAINTEXT = KeySelection("plaintext")
HOST_KEY = KeySelection("host", HOST_ASID)


def guest_key(asid: int) -> KeySelection:
    return KeySelection("guest", asid)


def select_key(gc: int, nc: int, guest_asid: int, forced_private: bool = False) -> KeySelection:
    """gC/nC key-selection table. Code fetches and guest page-table reads pass
    ``forced_private`` and always use the guest key."""
    if forced_private or gc:
        return guest_key(guest_asid)
    if nc:
        return HOST_KEY
    return PLAINTEXT


class _Vek:
    """Key slot. Material stays inside the engine; repr never shows it."""

    __slots__ = ("asid", "vm_id", "_enc", "_dec")

    def __init__(self, material: int, asid: int, vm_id: object = None):
        key = material.to_bytes(16, "big")
        cipher = Cipher(algorithms.AES(key), modes.ECB())
        self._enc = cipher.encryptor()
        self._dec = cipher.decryptor()
        self.asid = asid
        self.vm_id = vm_id

    def __repr__(self) -> str:
        return f"<Vek asid={self.asid} vm={self.vm_id!r}>"

    def enc(self, data: bytes) -> bytes:
        return self._enc.update(data)

    def dec(self, data: bytes) -> bytes:
        return self._dec.update(data)


def _xor(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


class CryptoEngine:
    """VEK store indexed by ASID plus the memory-encryption datapath."""

    def __init__(self, tweak_seed: int = 0, key_seed: int = 0):
        self.tweaks = TweakTable(tweak_seed)
        self._key_rng = random.Random(key_seed)
        self._host = _Vek(self._key_rng.getrandbits(128), HOST_ASID, "host")
        self.active: dict[int, _Vek] = {}
        # deactivated ASIDs -> flush operations performed since deactivation
        self.pending_flush: dict[int, set[str]] = {}
        # key slots stay loaded after DEACTIVATE until the ASID is re-bound;
        # cache write-back of lines tagged with such an ASID still needs them
        self._slots: dict[int, _Vek] = {}
        self.cache_writeback: Optional[Callable[[], None]] = None

    # -- lifecycle ---------------------------------------------------------

    @property
    def wbinvd_done(self) -> bool:
        return all("wbinvd" in ops for ops in self.pending_flush.values())

    @property
    def dfflush_done(self) -> bool:
        return all("df_flush" in ops for ops in self.pending_flush.values())

    def activate(self, asid: int, vm_id: object = None) -> None:
        if asid == HOST_ASID:
            raise IllegalAsidRange("ASID 0 is reserved for the host")
        if asid in self.active:
            raise AsidAlreadyActive(f"ASID {asid} is bound to {self.active[asid].vm_id!r}")
        ops = self.pending_flush.get(asid)
        if ops is not None:
            if "wbinvd" not in ops:
                raise WbinvdRequired(f"ASID {asid}: WBINVD_REQUIRED")
            if "df_flush" not in ops:
                raise DfflushRequired(f"ASID {asid}: DFFLUSH_REQUIRED")
            del self.pending_flush[asid]
        vek = _Vek(self._key_rng.getrandbits(128), asid, vm_id)
        self.active[asid] = vek
        self._slots[asid] = vek

    def deactivate(self, asid: int) -> None:
        if asid not in self.active:
            raise UnknownAsid(f"ASID {asid} is not active")
        del self.active[asid]
        self.pending_flush[asid] = set()

    def wbinvd(self) -> None:
        if self.cache_writeback is not None:
            self.cache_writeback()
        for ops in self.pending_flush.values():
            ops.add("wbinvd")

    def df_flush(self) -> None:
        for ops in self.pending_flush.values():
            ops.add("df_flush")

    def is_active(self, asid: int) -> bool:
        return asid in self.active

    def owner(self, asid: int) -> object:
        vek = self.active.get(asid)
        return None if vek is None else vek.vm_id

    # -- datapath ----------------------------------------------------------

    def tweak(self, addr: int) -> int:
        return self.tweaks.tweak(addr)

    def _vek(self, sel: KeySelection, allow_retired: bool = False) -> Optional[_Vek]:
        if sel.kind == "plaintext":
            return None
        if sel.kind == "host":
            return self._host
        vek = self.active.get(sel.asid)
        if vek is None and allow_retired:
            vek = self._slots.get(sel.asid)
        if vek is None:
            raise UnknownAsid(f"ASID {sel.asid} has no active VEK")
        return vek

    def encrypt(self, sel: KeySelection, addr: int, data: bytes, *, allow_retired: bool = False) -> bytes:
        """Encrypt whole 16-byte blocks starting at the (aligned) address."""
        addr = strip_cbit(addr)
        if addr % BLOCK or len(data) % BLOCK:
            raise ValueError("encryption works on aligned 16-byte blocks")
        vek = self._vek(sel, allow_retired)
        if vek is None:
            return bytes(data)
        return vek.enc(_xor(data, self.tweaks.stream(addr, len(data) // BLOCK)))

    def decrypt(self, sel: KeySelection, addr: int, data: bytes, *, allow_retired: bool = False) -> bytes:
        addr = strip_cbit(addr)
        if addr % BLOCK or len(data) % BLOCK:
            raise ValueError("decryption works on aligned 16-byte blocks")
        vek = self._vek(sel, allow_retired)
        if vek is None:
            return bytes(data)
        return _xor(vek.dec(data), self.tweaks.stream(addr, len(data) // BLOCK))

    def encrypt_block(self, asid: int, addr: int, m: bytes) -> bytes:
        if len(m) != BLOCK:
            raise ValueError("block must be 16 bytes")
        sel = HOST_KEY if asid == HOST_ASID else guest_key(asid)
        return self.encrypt(sel, addr, m)

    def decrypt_block(self, asid: int, addr: int, c: bytes) -> bytes:
        if len(c) != BLOCK:
            raise ValueError("block must be 16 bytes")
        sel = HOST_KEY if asid == HOST_ASID else guest_key(asid)
        return self.decrypt(sel, addr, c)
