import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from curesim import capability as cap
from curesim.capability import (
    CardTables, CheckFail, Cmt, CmtFull, DirectContext, NotFound, ResizeLimit, cap_addr, decode_metadata,
    encode_metadata, mutate_ptr, resize, scan_and_clear,
)
from curesim.tagging import I8_PTR, StackPointer, get_tag, make_tagged, tagd, xtag
from oracles import row_way_slot

ways = st.sampled_from([1, 2, 4, 8, 16])
tags = st.integers(0, 0xFFFF)
addrs = st.integers(0, (1 << 47) - 1)


def test_cap_addr_example():
    assert cap_addr(0x10000000, 0xA5, 4, 2) == 0x100014B0


@given(st.integers(0, 1 << 47), tags, ways, st.data())
def test_cap_addr_matches_row_layout(base, tag, n, data):
    w = data.draw(st.integers(0, n - 1))
    assert cap_addr(base, tag, n, w) == row_way_slot(base, tag, n, w)


@settings(max_examples=30)
@given(st.integers(0, 1 << 40), ways)
def test_layout_injective_and_row_spacing(base, n):
    sample = range(0, 0x10000, 97)
    slots = {cap_addr(base, t, n, w) for t in sample for w in range(n)}
    assert len(slots) == len(sample) * n
    for t in (0, 1, 0x1234, 0xFFFE):
        assert cap_addr(base, t + 1, n, 0) - cap_addr(base, t, n, 0) == 8 * n


def test_encoding_exact_and_coarse():
    assert encode_metadata(0x1000, 20) == (0x1000 << 16) | 20
    assert encode_metadata(0x1000, 32767) & 0xFFFF == 32767
    assert encode_metadata(0x1000, 32768) & 0xFFFF == 0x8000 | 32
    assert encode_metadata(0x1000, 32769) & 0xFFFF == 0x8000 | 33
    assert decode_metadata(encode_metadata(0x1000, 40000)) == (0x1000, 40 * 1024)
    with pytest.raises(ValueError):
        encode_metadata(0, -1)


@given(addrs, st.integers(0, 1 << 24))
def test_decoded_size_covers_request(base, size):
    b, s = decode_metadata(encode_metadata(base, size))
    assert b == base
    assert s == size if size <= 0x7FFF else size <= s < size + 1024


@given(addrs.filter(lambda a: a < (1 << 47) - 70000), st.integers(1, 70000), st.integers(1, 0xFFFF), st.data())
def test_cstr_then_check_round_trip(base, size, tag, data):
    cmt = Cmt()
    p = make_tagged(tag, base)
    way, fault = cap.cstr(cmt, p, size)
    assert fault is None
    off = data.draw(st.integers(0, size - 1))
    assert cap.check(cmt, p + off, 1) == (way, None)
    if size <= 0x7FFF:
        way2, fault = cap.check(cmt, p + size, 1)
        assert way2 is None and isinstance(fault, CheckFail)


def test_check_is_width_inclusive():
    cmt = Cmt()
    p = make_tagged(7, 0x1000)
    cap.cstr(cmt, p, 16)
    assert cap.check(cmt, p + 8, 8)[1] is None
    assert isinstance(cap.check(cmt, p + 9, 8)[1], CheckFail)
    assert isinstance(cap.check(cmt, p - 1, 1)[1], CheckFail)


def test_row_full_and_not_found():
    cmt = Cmt(num_ways=2)
    for i in range(2):
        assert cap.cstr(cmt, make_tagged(9, 0x1000 + 64 * i), 8)[1] is None
    assert cap.cstr(cmt, make_tagged(9, 0x2000), 8) == (None, CmtFull(9))
    assert cap.cclr(cmt, make_tagged(9, 0x3000)) == (None, NotFound(9, 0x3000))
    # cclr needs the exact base
    assert isinstance(cap.cclr(cmt, make_tagged(9, 0x1004))[1], NotFound)


def test_start_way_rotates_search():
    cmt = Cmt(num_ways=4)
    p = make_tagged(3, 0x5000)
    assert cap.cstr(cmt, p, 8, start_way=2) == (2, None)
    assert cap.cstr(cmt, make_tagged(3, 0x6000), 8, start_way=3) == (3, None)
    assert cap.cstr(cmt, make_tagged(3, 0x7000), 8, start_way=2) == (0, None)
    assert cap.cclr(cmt, p, start_way=1) == (2, None)


@st.composite
def populated(draw):
    n = draw(ways)
    cmt = Cmt(num_ways=n)
    live = []
    for _ in range(draw(st.integers(1, 40))):
        tag = draw(st.integers(1, 6))
        addr = draw(st.integers(1, 1 << 20)) * 16
        p = make_tagged(tag, addr)
        if cap.cstr(cmt, p, draw(st.integers(1, 4096)))[1] is None:
            live.append(p)
    return cmt, live


@given(populated(), st.data())
def test_cclr_removes_exactly_one_slot(state, data):
    cmt, live = state
    assume(live)
    p = data.draw(st.sampled_from(live))
    before = len(cmt.occupied)
    assert cap.cclr(cmt, p)[1] is None
    assert len(cmt.occupied) == before - 1
    assert sum(1 for w in range(cmt.num_ways) if cmt.read(get_tag(p), w)) == len(
        [k for k in cmt.occupied if k[0] == get_tag(p)]
    )


@given(populated())
def test_resize_preserves_words(state):
    cmt, live = state
    words = cmt.words()
    slots = dict(cmt.occupied)
    big = resize(cmt)
    assert big.num_ways == 2 * cmt.num_ways
    assert big.words() == words
    assert big.base == cmt.base + cmt.size_bytes
    for (tag, way), word in slots.items():
        assert big.read(tag, way) == word
    for p in live:
        assert cap.check(big, p, 1)[1] is None


def test_resize_releases_old_table_and_limits():
    cmt = Cmt(num_ways=4, max_ways=8)
    cap.cstr(cmt, make_tagged(1, 0x1000), 8)
    old = cmt.slot(1, 0)
    big = resize(cmt)
    assert big.memory.read_u64(old) == 0
    with pytest.raises(ResizeLimit):
        resize(big)


def test_snapshot_text():
    cmt = Cmt()
    cap.cstr(cmt, make_tagged(0x00A5, 0x1000), 20)
    assert cmt.snapshot() == "00a5    0 000000001000 20\n"


# -- card tables and sub-object mutation -----------------------------------

def test_mutation_idempotent_and_scan_clears():
    ctx = DirectContext(Cmt())
    cards = CardTables()
    obj = tagd(0x4000, StackPointer(0x7000), 1)
    ctx.cstr(obj, 64)
    sub = obj + 16
    outs = {mutate_ptr(sub, 8, ctx, cards) for _ in range(100)}
    assert len(outs) == 1
    assert ctx.cstr_count == 2
    q = outs.pop()
    assert xtag(q) == 0x4010
    assert q == tagd(0x4010, I8_PTR)
    assert cap.check(ctx.cmt, q, 8)[1] is None
    assert isinstance(cap.check(ctx.cmt, q + 1, 8)[1], CheckFail)
    assert cards.consistent()
    assert scan_and_clear(0x4000, 64, ctx, cards) == 1
    assert cards.consistent() and not cards.level1 and not cards.level2
    assert isinstance(cap.check(ctx.cmt, q, 1)[1], CheckFail)


def test_card_indexing():
    cards = CardTables()
    cards.mark(0x1203)
    assert cards.level1 == {0x1203 >> 3: 1 << 3}
    assert cards.level2 == {0x1203 >> 9: 1}
    assert cards.is_marked(0x1203) and not cards.is_marked(0x1204)


def test_scan_skips_unmarked_regions():
    ctx = DirectContext(Cmt())
    cards = CardTables()
    mutate_ptr(0x10_0000 + 4096, 8, ctx, cards)
    scan_and_clear(0x10_0000, 8192, ctx, cards)
    assert cards.regions_walked == 1
    assert cards.level1_reads == 512 // 8


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 4000), st.integers(1, 64)), max_size=40),
       st.lists(st.tuples(st.integers(0, 4000), st.integers(1, 2000)), max_size=10))
def test_card_invariant_holds(mutations, scans):
    ctx = DirectContext(Cmt())
    cards = CardTables()
    base = 0x20_0000
    for (off, size), scan in zip(mutations, scans + [None] * len(mutations)):
        mutate_ptr(base + off, size, ctx, cards)
        assert cards.consistent()
        if scan:
            scan_and_clear(base + scan[0], scan[1], ctx, cards)
            assert cards.consistent()
            for a in range(base + scan[0], base + scan[0] + scan[1]):
                assert not cards.is_marked(a)
    # marks and metadata agree: every marked base holds metadata
    for idx, bits in cards.level1.items():
        for b in range(8):
            if bits >> b & 1:
                assert cap.check(ctx.cmt, tagd((idx << 3) | b, I8_PTR), 1)[1] is None


@given(st.integers(1, 200))
def test_repeated_mutation_single_cstr(n):
    ctx = DirectContext(Cmt())
    cards = CardTables()
    for _ in range(n):
        mutate_ptr(0x9000, 24, ctx, cards)
    assert ctx.cstr_count == 1


def test_direct_context_resizes():
    ctx = DirectContext(Cmt(num_ways=1))
    ctx.cstr(make_tagged(5, 0x100), 8)
    ctx.cstr(make_tagged(5, 0x200), 8)
    assert ctx.resizes == 1 and ctx.cmt.num_ways == 2
    assert ctx.cclr(make_tagged(5, 0x200)) and not ctx.cclr(make_tagged(5, 0x200))
