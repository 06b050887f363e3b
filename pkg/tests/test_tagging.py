import binascii

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curesim.tagging import (
    ADDR_MASK, I8_PTR, Lfsr16, StackPointer, TypeId, compute_tag, crc16, get_addr, get_tag,
    is_tagged, lfsr_step, make_tagged, tagd, type_id, xtag,
)
from oracles import crc16_bitwise, fnv1a64, lfsr_bitwise, reference_tag

addrs = st.integers(0, ADDR_MASK)
raw64 = st.integers(0, (1 << 64) - 1)
type_names = st.sampled_from(["i8", "i64", "i8*", "i64*", "struct.S", "[10 x i8]", "struct.Node*"])


def test_crc16_check_value():
    assert crc16(b"123456789") == 0x29B1
    assert crc16(b"") == 0xFFFF


@given(st.binary(max_size=64))
def test_crc16_matches_bitwise(data):
    assert crc16(data) == crc16_bitwise(data)
    assert crc16(data) == binascii.crc_hqx(data, 0xFFFF)


def test_lfsr_known_steps():
    assert lfsr_step(0xACE1) == 0x5670
    assert lfsr_step(0x0001) == 0x8000
    lf = Lfsr16(0xACE1)
    lf.step()
    assert lf.state == 0x5670


def test_lfsr_full_period_and_never_zero():
    seen = set()
    s = 1
    for _ in range(65535):
        assert s != 0
        assert lfsr_step(s) == lfsr_bitwise(s)
        seen.add(s)
        s = lfsr_step(s)
    assert s == 1
    assert len(seen) == 65535


def test_lfsr_rejects_zero_seed():
    with pytest.raises(ValueError):
        Lfsr16(0)


def test_type_id_is_fnv1a():
    for name in ("i8*", "struct.S", "[10 x i8]"):
        assert type_id(name) == fnv1a64(name)
    assert type_id("") == 0xCBF29CE484222325


def test_field_helpers():
    p = make_tagged(0xBEEF, 0x1234_5678_9ABC)
    assert get_tag(p) == 0xBEEF
    assert get_addr(p) == 0x1234_5678_9ABC
    assert is_tagged(p) and not is_tagged(xtag(p))
    assert xtag(p) == 0x1234_5678_9ABC


@given(raw64, st.integers(0, (1 << 64) - 1), st.integers(1, 0xFFFF))
def test_tagd_sp_matches_reference(p, sp, lfsr):
    t = get_tag(tagd(p, StackPointer(sp), lfsr))
    assert t == reference_tag(p & ADDR_MASK, sp ^ lfsr)


@given(raw64, type_names)
def test_tagd_type_matches_reference(p, name):
    assert get_tag(tagd(p, TypeId.of(name))) == reference_tag(p & ADDR_MASK, fnv1a64(name))


@given(raw64, st.integers(0, (1 << 64) - 1), st.integers(1, 0xFFFF))
def test_tag_nonzero_and_address_preserved(p, sp, lfsr):
    q = tagd(p, StackPointer(sp), lfsr)
    assert get_tag(q) != 0
    assert xtag(q) == xtag(p)


@given(addrs, type_names, st.integers(1, 0xFFFF))
def test_type_tag_is_pure(addr, name, lfsr):
    # the LFSR only enters through the stack-pointer modifier
    assert tagd(addr, TypeId.of(name), lfsr) == tagd(addr, TypeId.of(name), 1)
    assert tagd(addr, TypeId.of(name)) == tagd(addr | (0x55 << 48), TypeId.of(name))


def test_zero_crc_maps_to_one():
    # find a mix value whose CRC is zero and check the substitution
    target = next(m for m in range(1 << 20) if crc16(m.to_bytes(8, "little")) == 0)
    assert compute_tag(target, TypeId(0)) == 1


def test_tagd_accepts_lfsr_object():
    lf = Lfsr16(0x1234)
    assert tagd(0x4000, StackPointer(0x7000), lf) == tagd(0x4000, StackPointer(0x7000), 0x1234)


@settings(max_examples=50)
@given(st.integers(1, 0xFFFF))
def test_lfsr_object_matches_function(seed):
    lf = Lfsr16(seed)
    s = seed
    for _ in range(20):
        lf.step()
        s = lfsr_step(s)
        assert lf.state == s


def test_i8_ptr_type_id():
    assert I8_PTR.value == fnv1a64("i8*")
