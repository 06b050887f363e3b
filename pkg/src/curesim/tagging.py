"""Pointer tags: CRC-16 hashing, the LFSR modifier, type ids, tagd/xtag."""

from dataclasses import dataclass

TAG_SHIFT = 48
ADDR_MASK = (1 << TAG_SHIFT) - 1
MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def _crc_table():
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ 0x1021) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _crc_table()


def crc16(data):
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, xorout 0)."""
    crc = 0xFFFF
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[(crc >> 8) ^ b]
    return crc


def get_tag(raw):
    return (raw >> TAG_SHIFT) & 0xFFFF


def get_addr(raw):
    return raw & ADDR_MASK


def make_tagged(tag, addr):
    return ((tag & 0xFFFF) << TAG_SHIFT) | (addr & ADDR_MASK)


def is_tagged(raw):
    return get_tag(raw) != 0


def xtag(raw):
    return raw & ADDR_MASK


class Lfsr16:
    """16-bit Fibonacci LFSR, taps 16,14,13,11.  State never reaches zero."""

    def __init__(self, seed=0xACE1):
        seed &= 0xFFFF
        if seed == 0:
            raise ValueError("LFSR seed must be nonzero")
        self.state = seed

    def step(self):
        self.state = lfsr_step(self.state)
        return self.state

    def __repr__(self):
        return f"Lfsr16(0x{self.state:04X})"


def lfsr_step(s):
    fb = (s ^ (s >> 2) ^ (s >> 3) ^ (s >> 5)) & 1
    return (s >> 1) | (fb << 15)


def type_id(canonical):
    """FNV-1a 64 of a canonical type string."""
    h = FNV_OFFSET
    for b in canonical.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class StackPointer:
    value: int


@dataclass(frozen=True)
class TypeId:
    value: int

    @classmethod
    def of(cls, canonical):
        return cls(type_id(canonical))


I8_PTR = TypeId.of("i8*")


def compute_tag(addr, mod, lfsr_state=0):
    mix = addr ^ mod.value
    if isinstance(mod, StackPointer):
        mix ^= lfsr_state
    tag = crc16((mix & MASK64).to_bytes(8, "little"))
    return tag or 1


def tagd(raw, mod, lfsr=None):
    """Tag `raw` using modifier `mod`; `lfsr` is a Lfsr16 or a raw state."""
    addr = raw & ADDR_MASK
    state = lfsr.state if isinstance(lfsr, Lfsr16) else (lfsr or 0)
    return make_tagged(compute_tag(addr, mod, state), addr)
