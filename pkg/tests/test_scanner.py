import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sevsim.errors import InputTooShort
from sevsim.scanner import DEFAULT_PATTERNS, gadget_hits, leakable_mask, scan_gadgets, scan_pte_fraction
from helpers import naive_leakable


def naive_scan(data, last_level):
    offs = []
    for off in range(0, len(data) - len(data) % 8, 8):
        v = 0
        for k in range(8):
            v |= data[off + k] << (8 * k)
        if naive_leakable(v, last_level):
            offs.append(off)
    return offs


def naive_find(data, pattern):
    out = []
    for i in range(len(data) - len(pattern) + 1):
        if all(p is None or data[i + j] == p for j, p in enumerate(pattern)):
            out.append(i)
    return out


def test_all_zero_file():
    r = scan_pte_fraction(bytes(4096))
    assert r.fraction == 0 and r.total_blocks == 512


def test_too_short():
    with pytest.raises(InputTooShort):
        scan_pte_fraction(b"\x01" * 7)


def test_trailing_partial_block_ignored():
    r = scan_pte_fraction((1).to_bytes(8, "little") + b"\x01\x00\x00")
    assert (r.total_blocks, r.leakable_blocks) == (1, 1)


def test_planted_fraction_exact():
    rng = random.Random(0)
    blocks = [0] * 10_000
    for i in rng.sample(range(10_000), 37):
        blocks[i] = (rng.getrandbits(36) << 12) | 0x63
    data = b"".join(b.to_bytes(8, "little") for b in blocks)
    r = scan_pte_fraction(data)
    assert r.leakable_blocks == 37 and r.total_blocks == 10_000
    assert r.fraction == 0.0037


def test_equivalence_with_naive_on_100_fixtures():
    rng = random.Random(1)
    for i in range(100):
        n = rng.randrange(8, 3000)
        data = bytearray(rng.randbytes(n))
        # bias some blocks towards the interesting region
        for off in range(0, n - 7, 8):
            if rng.random() < 0.3:
                data[off + 6] = 0
                data[off + 7] &= 0x80
                data[off] |= 1
        for last in (False, True):
            assert scan_pte_fraction(bytes(data), last).leakable_offsets == naive_scan(data, last)


@given(st.binary(min_size=8, max_size=512), st.booleans())
def test_mask_matches_naive(data, last):
    assert (np.flatnonzero(leakable_mask(data, last)) * 8).tolist() == naive_scan(data, last)


def test_deterministic_report():
    data = random.Random(2).randbytes(1 << 16)
    assert scan_pte_fraction(data).to_record() == scan_pte_fraction(data).to_record()


def test_random_fraction_last_level():
    data = np.random.default_rng(3).integers(0, 2**63, size=2_000_000, dtype=np.uint64) * 2 \
        + np.random.default_rng(4).integers(0, 2, size=2_000_000, dtype=np.uint64)
    r = scan_pte_fraction(data.astype("<u8").tobytes(), last_level=True)
    assert abs(r.fraction - 2 ** -16) < 0.5 * 2 ** -16


def test_gadget_at_paper_offset():
    data = bytearray(0x10000)
    data[0xCA9A:0xCA9D] = bytes.fromhex("488b03")
    assert scan_gadgets(bytes(data), ["488b03"]) == [0xCA9A]


def test_empty_pattern_list():
    assert scan_gadgets(b"\x48\x8b\x03", []) == []


def test_three_occurrences_and_overlap():
    data = b"\x00aaXaa\x00aa"
    assert scan_gadgets(data, [b"aa"]) == [1, 4, 7]
    assert scan_gadgets(b"aaaa", [b"aa"]) == [0, 1, 2]


def test_wildcards_and_ids():
    data = bytes.fromhex("00 49 89 04 24 48 8b 03 48 8b 07")
    hits = gadget_hits(data, DEFAULT_PATTERNS)
    assert [(h.offset, h.pattern_id) for h in hits] == [(1, "store_rax_r12"), (5, "load_rbx_rax")]
    assert scan_gadgets(data, ["48 8b ??"]) == [5, 8]


@given(st.binary(max_size=300), st.lists(st.one_of(st.none(), st.integers(0, 255)), min_size=1, max_size=3)
       .filter(lambda p: any(x is not None for x in p)))
def test_gadget_search_matches_naive(data, pattern):
    hexpat = "".join("??" if p is None else f"{p:02x}" for p in pattern)
    assert scan_gadgets(data, [hexpat]) == naive_find(data, pattern)


def test_bad_pattern():
    with pytest.raises(ValueError):
        scan_gadgets(b"", ["abc"])
