"""Sparse byte-addressed memory backed by 4 KiB pages."""

PAGE_BITS = 12
PAGE_SIZE = 1 << PAGE_BITS
PAGE_MASK = PAGE_SIZE - 1


class SparseMemory:
    def __init__(self):
        self.pages = {}

    def _page(self, n):
        page = self.pages.get(n)
        if page is None:
            page = self.pages[n] = bytearray(PAGE_SIZE)
        return page

    def read(self, addr, n):
        off = addr & PAGE_MASK
        if off + n <= PAGE_SIZE:
            page = self.pages.get(addr >> PAGE_BITS)
            if page is None:
                return bytes(n)
            return bytes(page[off : off + n])
        return bytes(self.read_byte(addr + i) for i in range(n))

    def write(self, addr, data):
        off = addr & PAGE_MASK
        if off + len(data) <= PAGE_SIZE:
            self._page(addr >> PAGE_BITS)[off : off + len(data)] = data
            return
        for i, b in enumerate(data):
            self.write_byte(addr + i, b)

    def read_byte(self, addr):
        page = self.pages.get(addr >> PAGE_BITS)
        return 0 if page is None else page[addr & PAGE_MASK]

    def write_byte(self, addr, value):
        self._page(addr >> PAGE_BITS)[addr & PAGE_MASK] = value & 0xFF

    def read_u64(self, addr):
        return int.from_bytes(self.read(addr, 8), "little")

    def write_u64(self, addr, value):
        self.write(addr, (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))

    def release(self, start, end):
        """Drop whole pages inside [start, end)."""
        first = (start + PAGE_MASK) >> PAGE_BITS
        last = end >> PAGE_BITS
        for n in [p for p in self.pages if first <= p < last]:
            del self.pages[n]

    def snapshot(self, lo=0, hi=1 << 48):
        """Non-zero pages in [lo, hi) as {page_number: bytes}."""
        out = {}
        for n in sorted(self.pages):
            if lo <= (n << PAGE_BITS) < hi and any(self.pages[n]):
                out[n] = bytes(self.pages[n])
        return out
