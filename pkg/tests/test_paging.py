import random

import pytest
from hypothesis import given, strategies as st

from sevsim.errors import (GuestPageFault, NestedPageFault, NonCanonicalAddress, NotLeakable,
                           UnalignedOffset)
from sevsim.paging import (Npt, Pte, WalkContext, choose_nrip, decode_leaked_gpa, gva_from_indices,
                           guest_walk, is_canonical, make_pte, nested_translate, pte_is_leakable,
                           va_indices)
from helpers import launch_pair, walk_mem

u64 = st.integers(0, (1 << 64) - 1)


def naive_leakable(v, last_level):
    bits = [(v >> i) & 1 for i in range(64)]
    if bits[0] != 1:
        return False
    if any(bits[i] for i in range(48, 63)):
        return False
    return last_level or (bits[7] == 0 and bits[8] == 0)


# -- predicate and decoding ---------------------------------------------------------

@pytest.mark.parametrize("raw,last,expected", [
    (0x0000F12345678E7F, False, True),
    (0x0, False, False),
    (0x0004000000000001, False, False),
    (0x0000000000000081, False, False),
    (0x0000000000000081, True, True),
    (0x0000000000000101, True, True),
    (0x8000000000000001, False, True),
])
def test_leakable_examples(raw, last, expected):
    assert pte_is_leakable(raw, last) is expected
    assert pte_is_leakable(raw.to_bytes(8, "little"), last) is expected


def test_decode_worked_examples():
    assert decode_leaked_gpa(0x0000F12345678E7F) == 0x712345678
    assert decode_leaked_gpa(bytes.fromhex("7f8e674523f10000")) == 0x712345678
    assert decode_leaked_gpa(0x00000ABCDEF12001) == 0xABCDEF12
    assert decode_leaked_gpa(0x0000000000000001) == 0


def test_decode_rejects_non_pte():
    with pytest.raises(NotLeakable):
        decode_leaked_gpa(0x0004000000000001)


@given(u64, st.booleans())
def test_predicate_matches_bitwise_oracle(v, last):
    assert pte_is_leakable(v, last) == naive_leakable(v, last)


def test_predicate_exhaustive_over_relevant_bits():
    r = random.Random(3)
    for pattern in range(1 << 18):
        # bit0, bits 48..62, bit7, bit8 embedded in random filler
        filler = r.getrandbits(64) & ~(1 | (0x7FFF << 48) | (1 << 7) | (1 << 8))
        v = filler | (pattern & 1) | (((pattern >> 1) & 0x7FFF) << 48) \
            | (((pattern >> 16) & 1) << 7) | (((pattern >> 17) & 1) << 8)
        for last in (False, True):
            assert pte_is_leakable(v, last) == naive_leakable(v, last)


def test_encode_decode_identity_10k_pfns():
    r = random.Random(4)
    for _ in range(10_000):
        pfn = r.getrandbits(36)   # bits 51:48 of a pte would be reserved
        raw = make_pte(pfn, cbit=bool(r.getrandbits(1)))
        assert decode_leaked_gpa(raw) == pfn & ~(1 << 35)


def test_pte_views():
    p = Pte(0x8000F12345678E7F)
    assert p.present and not p.ps and not p.g
    assert p.cbit == 1 and p.pfn == 0xF12345678 and p.reserved_48_62 == 0
    assert Pte(0x0004000000000181).reserved_48_62 == 4
    assert Pte(0x181).ps and Pte(0x181).g


# -- nRIP selection --------------------------------------------------------------

def test_choose_nrip_examples():
    assert choose_nrip(0) == 0
    assert choose_nrip(0x10) == 0x10000000000
    assert choose_nrip(0x800) == 0xFFFF800000000000
    assert choose_nrip(0xFF8) == 0xFFFFFF8000000000


def test_choose_nrip_all_offsets():
    for off in range(0, 0x1000, 8):
        nrip = choose_nrip(off)
        assert (nrip >> 39) & 0x1FF == off // 8
        assert is_canonical(nrip)
        assert va_indices(nrip)[0] == off // 8


@pytest.mark.parametrize("bad", [1, 4, 0x1000, -8])
def test_choose_nrip_rejects(bad):
    with pytest.raises(UnalignedOffset):
        choose_nrip(bad)


@given(st.integers(0, 511), st.integers(0, 511), st.integers(0, 511), st.integers(0, 511),
       st.integers(0, 0xFFF))
def test_index_roundtrip(i4, i3, i2, i1, off):
    gva = gva_from_indices(i4, i3, i2, i1, off)
    assert is_canonical(gva)
    assert va_indices(gva) == (i4, i3, i2, i1)
    assert gva & 0xFFF == off


# -- nested translation ---------------------------------------------------------------

def test_nested_identity_and_fault():
    npt = Npt()
    npt.map(5, 5)
    assert nested_translate(0x5000, npt)[0] == 0x5000
    npt.clear_present_all()
    npt.flush_ntlb()
    with pytest.raises(NestedPageFault) as ei:
        nested_translate(0x5000, npt)
    assert ei.value.gpa == 0x5000


def test_nested_remap_and_ntlb():
    npt = Npt()
    npt.map(0x10, 0x99)
    assert nested_translate(0x10008, npt)[0] == 0x99008
    npt.map(0x10, 0x77)
    assert nested_translate(0x10008, npt)[0] == 0x99008   # stale until flushed
    npt.flush_ntlb(0x10)
    assert nested_translate(0x10008, npt)[0] == 0x77008


def test_nested_strips_cbit():
    npt = Npt()
    npt.map(3, 8)
    assert nested_translate(0x3010 | (1 << 47), npt)[0] == 0x8010


# -- guest walks ------------------------------------------------------------------------

def test_own_walk_matches_flat_map():
    hv, victim, _, _ = launch_pair(seed=2, n_data=40)
    img = victim.ground_truth
    ctx = WalkContext(gcr3=img.gcr3, asid=victim.asid, npt=victim.npt)
    mem = walk_mem(hv, victim.asid)
    for gva, gpa in img.mappings.items():
        res = guest_walk(gva, ctx, mem)
        assert res.gpa_page == gpa
        assert res.spa_page == victim.spa_of(gpa)


def test_wrong_asid_walk_faults():
    hv, victim, attacker, data = launch_pair(seed=3)
    ctx = WalkContext(gcr3=victim.ground_truth.gcr3, asid=attacker.asid, npt=victim.npt)
    with pytest.raises(GuestPageFault):
        guest_walk(data[0], ctx, walk_mem(hv, attacker.asid))


def test_remapped_root_leaks_target_block():
    hv, victim, _, _ = launch_pair(seed=4)
    img = victim.ground_truth
    target_gpa, off = next((g, o) for g, page in sorted(img.pages.items()) if g != img.gcr3
                           for o in range(0, 0x1000, 8) if pte_is_leakable(page[o:o + 8]))
    spfn = victim.backing[target_gpa >> 12]
    plain = img.pages[target_gpa]
    npt = Npt()
    npt.map(img.gcr3 >> 12, spfn)   # root now points at the target frame
    ctx = WalkContext(gcr3=img.gcr3, asid=victim.asid, npt=npt)
    with pytest.raises(NestedPageFault) as ei:
        guest_walk(choose_nrip(off), ctx, walk_mem(hv, victim.asid))
    assert (ei.value.gpa >> 12) & ~(1 << 35) == decode_leaked_gpa(plain[off:off + 8])


def test_walk_rejects_noncanonical():
    ctx = WalkContext(gcr3=0, asid=1, npt=Npt())
    with pytest.raises(NonCanonicalAddress):
        guest_walk(0x0000800000000000, ctx, None)
