"""Capability metadata, the tag-indexed metadata table (CMT) and card tables.

A metadata word is ``(base << 16) | encodedSize``.  Sizes up to 32767 are
stored exactly; larger sizes are stored in KiB units (rounded up) with the
top bit of the size field set.  The all-zero word marks an empty slot.
"""

from dataclasses import dataclass

from .memory import SparseMemory
from .tagging import ADDR_MASK, I8_PTR, get_addr, get_tag, tagd

ROWS = 1 << 16
EXACT_LIMIT = 0x7FFF
COARSE_FLAG = 0x8000
COARSE_UNIT = 1024
DEFAULT_MAX_WAYS = 1024


def encode_metadata(base, size):
    if size < 0:
        raise ValueError("negative size")
    if size <= EXACT_LIMIT:
        enc = size
    else:
        units = -(-size // COARSE_UNIT)
        if units > EXACT_LIMIT:
            raise ValueError(f"object too large to encode: {size}")
        enc = COARSE_FLAG | units
    return ((base & ADDR_MASK) << 16) | enc


def decode_metadata(word):
    """(base, size) of a metadata word."""
    enc = word & 0xFFFF
    size = (enc & EXACT_LIMIT) * COARSE_UNIT if enc & COARSE_FLAG else enc
    return word >> 16, size


def cap_addr(base, tag, num_ways, way):
    """Slot address: base + (tag << (3 + log2 N)) + (way << 3)."""
    return base + (tag << (3 + num_ways.bit_length() - 1)) + (way << 3)


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


# faults are returned as values; the machine decides what to do with them


@dataclass(frozen=True)
class CmtFull:
    tag: int


@dataclass(frozen=True)
class NotFound:
    tag: int
    addr: int


@dataclass(frozen=True)
class CheckFail:
    tag: int
    addr: int
    width: int


class Cmt:
    """Set-associative table of 8-byte words, one row per 16-bit tag."""

    def __init__(self, memory=None, base=0x2000_0000_0000, num_ways=4, max_ways=DEFAULT_MAX_WAYS):
        if not _is_pow2(num_ways):
            raise ValueError("numWays must be a power of two")
        self.memory = memory if memory is not None else SparseMemory()
        self.base = base
        self.num_ways = num_ways
        self.max_ways = max_ways
        self.occupied = {}  # (tag, way) -> word; mirror of the non-empty slots

    @property
    def size_bytes(self):
        return 8 * self.num_ways * ROWS

    def slot(self, tag, way):
        return cap_addr(self.base, tag, self.num_ways, way)

    def read(self, tag, way):
        return self.memory.read_u64(self.slot(tag, way))

    def write(self, tag, way, word):
        self.memory.write_u64(self.slot(tag, way), word)
        if word:
            self.occupied[(tag, way)] = word
        else:
            self.occupied.pop((tag, way), None)

    def row(self, tag):
        return [self.read(tag, w) for w in range(self.num_ways)]

    def words(self):
        return sorted(self.occupied.values())

    def snapshot(self):
        lines = []
        for (tag, way) in sorted(self.occupied):
            base, size = decode_metadata(self.occupied[(tag, way)])
            lines.append(f"{tag:04x} {way:4d} {base:012x} {size}")
        return "\n".join(lines) + ("\n" if lines else "")


def _order(cmt, start_way):
    n = cmt.num_ways
    return [(start_way + i) % n for i in range(n)]


def cstr(cmt, ptr, size, start_way=0):
    """Store metadata for tagged `ptr`; returns (way, None) or (None, CmtFull)."""
    tag = get_tag(ptr)
    word = encode_metadata(get_addr(ptr), size)
    for way in _order(cmt, start_way):
        if cmt.read(tag, way) == 0:
            cmt.write(tag, way, word)
            return way, None
    return None, CmtFull(tag)


def cclr(cmt, ptr, start_way=0):
    """Clear the slot whose base equals ptr's address; (way, None) or (None, NotFound)."""
    tag, addr = get_tag(ptr), get_addr(ptr)
    for way in _order(cmt, start_way):
        word = cmt.read(tag, way)
        if word and word >> 16 == addr:
            cmt.write(tag, way, 0)
            return way, None
    return None, NotFound(tag, addr)


def check(cmt, ptr, width, start_way=0):
    """Bounds check an access of `width` bytes; (way, None) or (None, CheckFail)."""
    tag, addr = get_tag(ptr), get_addr(ptr)
    for way in _order(cmt, start_way):
        word = cmt.read(tag, way)
        if word:
            base, size = decode_metadata(word)
            if base <= addr and addr + width <= base + size:
                return way, None
    return None, CheckFail(tag, addr, width)


def find_word(cmt, ptr, width):
    way, fault = check(cmt, ptr, width)
    return None if fault else cmt.read(get_tag(ptr), way)


class ResizeLimit(Exception):
    pass


def resize(cmt, new_base=None):
    """Double the ways into a fresh region; old way w lands in new way w."""
    ways = cmt.num_ways * 2
    if ways > cmt.max_ways:
        raise ResizeLimit(f"CMT would exceed {cmt.max_ways} ways")
    if new_base is None:
        new_base = cmt.base + cmt.size_bytes
    new = Cmt(cmt.memory, new_base, ways, cmt.max_ways)
    for (tag, way), word in sorted(cmt.occupied.items()):
        new.write(tag, way, word)
    cmt.memory.release(cmt.base, cmt.base + cmt.size_bytes)
    return new


# ---------------------------------------------------------------------------
# card tables and sub-object pointer mutation

REGION_SHIFT = 9  # 512-byte second-level regions


class CardTables:
    """Two-level mark bitmaps, kept sparse.

    level1 maps addr >> 3 to a byte whose bit (addr & 7) marks a sub-object
    base; level2 maps addr >> 9 to a nonzero byte when any level1 mark lies
    in that 512-byte region."""

    def __init__(self):
        self.level1 = {}
        self.level2 = {}
        self.level1_reads = 0
        self.regions_walked = 0

    @staticmethod
    def index(addr):
        return addr >> 3, 1 << (addr & 7), addr >> REGION_SHIFT

    def is_marked(self, addr):
        idx, mask, _ = self.index(addr)
        return bool(self.level1.get(idx, 0) & mask)

    def mark(self, addr):
        idx, mask, idx2 = self.index(addr)
        self.level1[idx] = self.level1.get(idx, 0) | mask
        self.level2[idx2] = 1

    def consistent(self):
        return all(self.level2.get(idx >> 6) for idx, bits in self.level1.items() if bits)


class DirectContext:
    """Minimal capability context: CMT operations with automatic resize."""

    def __init__(self, cmt):
        self.cmt = cmt
        self.cstr_count = 0
        self.cclr_count = 0
        self.resizes = 0

    def cstr(self, ptr, size):
        while True:
            way, fault = cstr(self.cmt, ptr, size)
            if fault is None:
                self.cstr_count += 1
                return way
            self.cmt = resize(self.cmt)
            self.resizes += 1

    def cclr(self, ptr):
        way, fault = cclr(self.cmt, ptr)
        if fault is None:
            self.cclr_count += 1
        return fault is None


def mutate_ptr(ptr, sub_size, ctx, cards):
    """Re-tag a sub-object pointer; store its metadata the first time."""
    tagged = tagd(ptr, I8_PTR)
    addr = tagged & ADDR_MASK
    if not cards.is_marked(addr):
        ctx.cstr(tagged, sub_size)
        cards.mark(addr)
    return tagged


def scan_and_clear(obj_base, obj_size, ctx, cards):
    """Clear metadata of every marked sub-object inside [obj_base, obj_base+obj_size)."""
    lo = obj_base & ADDR_MASK
    hi = lo + obj_size
    if obj_size <= 0:
        return 0
    cleared = 0
    for region in range(lo >> REGION_SHIFT, ((hi - 1) >> REGION_SHIFT) + 1):
        if not cards.level2.get(region):
            continue
        cards.regions_walked += 1
        r_lo = max(lo, region << REGION_SHIFT)
        r_hi = min(hi, (region + 1) << REGION_SHIFT)
        for idx in range(r_lo >> 3, ((r_hi - 1) >> 3) + 1):
            cards.level1_reads += 1
            bits = cards.level1.get(idx, 0)
            if not bits:
                continue
            for bit in range(8):
                a = (idx << 3) | bit
                if bits & (1 << bit) and r_lo <= a < r_hi:
                    if ctx.cclr(tagd(a, I8_PTR)):
                        cleared += 1
                    bits &= ~(1 << bit)
            if bits:
                cards.level1[idx] = bits
            else:
                cards.level1.pop(idx, None)
        first = region << (REGION_SHIFT - 3)
        if not any(cards.level1.get(i) for i in range(first, first + (1 << (REGION_SHIFT - 3)))):
            cards.level2.pop(region, None)
    return cleared
