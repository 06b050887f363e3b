"""The simulated 48-bit machine that runs mini-IR with DPT enforcement."""

from dataclasses import dataclass, field

from . import capability as cap
from .capability import CardTables, Cmt, ResizeLimit
from .memory import SparseMemory
from .mini_ir import Field, Imm, Reg, canonical, sizeof
from .tagging import ADDR_MASK, MASK64, Lfsr16, StackPointer, TypeId, tagd
from .uarch import CCLR, CSTR, Pipeline, SimStats, UarchConfig

GLOBAL_BASE = 0x0000_0001_0000
HEAP_BASE = 0x0010_0000_0000
STACK_TOP = 0x7FFF_FFFF_0000
CMT_BASE = 0x2000_0000_0000

GLOBAL_END = GLOBAL_BASE + 0x0100_0000
HEAP_END = HEAP_BASE + 0x1_0000_0000
STACK_END = STACK_TOP - 0x1000_0000
GLOBAL_START = GLOBAL_BASE + 0x100  # keeps small underreads of the first global mapped
STACK_START = STACK_TOP - 0x100  # stands in for the caller's frame above main

PROGRAM_REGIONS = ((GLOBAL_BASE, GLOBAL_END), (HEAP_BASE, HEAP_END), (STACK_END, STACK_TOP))

MODES = ("off", "dpt-h", "dpt-c", "dpt-f")

SPATIAL = "SpatialCheckFail"
TEMPORAL = "TemporalCclrFail"
RESIZED = "CmtResized"


def align(n, a=16):
    return (n + a - 1) // a * a


def is_mapped(addr, width=1):
    end = addr + width
    for lo, hi in PROGRAM_REGIONS:
        if lo <= addr and end <= hi:
            return True
    return False


def signed(v):
    return v - (1 << 64) if v >> 63 else v


@dataclass
class MachineConfig:
    enable_dpt: bool = True
    cmt_base: int = CMT_BASE
    cmt_ways: int = 4
    mode: str = "dpt-f"
    lfsr_seed: int = 0xACE1
    max_ways: int = cap.DEFAULT_MAX_WAYS
    uarch_enabled: bool = False
    head_policy: str = "adaptive"
    ccache: bool = True
    max_steps: int = 20_000_000
    input: bytes = b""
    track_taint: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cmt_ways <= 0 or self.cmt_ways & (self.cmt_ways - 1):
            raise ValueError("cmt_ways must be a power of two")
        if not self.lfsr_seed & 0xFFFF:
            raise ValueError("lfsr_seed must be nonzero in its low 16 bits")

    def echo(self):
        return {
            "enableDPT": self.enable_dpt,
            "cmtBase": self.cmt_base,
            "cmtWays": self.cmt_ways,
            "mode": self.mode,
            "lfsrSeed": self.lfsr_seed,
            "maxWays": self.max_ways,
            "uarchEnabled": self.uarch_enabled,
            "headPolicy": self.head_policy,
        }


@dataclass
class Violation:
    kind: str
    function: str
    block: str
    index: int
    line: int
    opcode: str
    tag: int
    addr: int
    continued: bool = True
    detail: str = ""

    def to_dict(self):
        return {
            "kind": self.kind,
            "function": self.function,
            "block": self.block,
            "index": self.index,
            "line": self.line,
            "opcode": self.opcode,
            "tag": self.tag,
            "addr": self.addr,
            "continued": self.continued,
            "detail": self.detail,
        }


class HardAbort(Exception):
    pass


@dataclass
class RunResult:
    exit: dict
    violations: list
    stats: SimStats
    output: bytes = b""
    machine: object = field(default=None, repr=False)

    def kinds(self):
        out = {}
        for v in self.violations:
            out[v.kind] = out.get(v.kind, 0) + 1
        return out


class Heap:
    """Bump allocator with LIFO free-list reuse."""

    def __init__(self):
        self.brk = HEAP_BASE
        self.live = {}  # addr -> (capacity, requested size, site)
        self.free_list = []  # [(addr, capacity)], most recent last
        self.freed = set()

    def malloc(self, size, site=None):
        need = align(max(size, 1))
        for i in range(len(self.free_list) - 1, -1, -1):
            addr, capacity = self.free_list[i]
            if capacity >= need:
                del self.free_list[i]
                self.freed.discard(addr)
                self.live[addr] = (capacity, size, site)
                return addr
        addr = self.brk
        if addr + need > HEAP_END:
            raise HardAbort("heap exhausted")
        self.brk += need
        self.live[addr] = (need, size, site)
        return addr

    def free(self, addr):
        """Returns False for a repeated free of an already freed block."""
        if addr in self.live:
            capacity = self.live.pop(addr)[0]
            self.free_list.append((addr, capacity))
            self.freed.add(addr)
            return True
        if addr in self.freed:
            return False
        raise HardAbort(f"free of an address that was never allocated: {addr:#x}")

    def size_of(self, addr):
        entry = self.live.get(addr)
        return None if entry is None else entry[1]


class Frame:
    __slots__ = ("fn", "regs", "code", "bi", "ip", "sp_base", "ret_dst", "allocas", "taint")

    def __init__(self, fn, code, sp_base, ret_dst):
        self.fn = fn
        self.code = code
        self.regs = {}
        self.bi = 0
        self.ip = 0
        self.sp_base = sp_base
        self.ret_dst = ret_dst
        self.allocas = []
        self.taint = set()


class _Compiled:
    """Per-function lookup tables built once per run."""

    def __init__(self, fn):
        self.fn = fn
        self.blocks = [b.instrs for b in fn.blocks]
        self.labels = [b.label for b in fn.blocks]
        self.label_index = {b.label: i for i, b in enumerate(fn.blocks)}
        self.extra = {}
        for b in fn.blocks:
            for ins in b.instrs:
                if ins.op == "gep":
                    const = 0
                    dyn = []
                    t = ins.ty
                    for step in ins.path:
                        if isinstance(step, Field):
                            const += sum(sizeof(ft) for _, ft in t.fields[: step.index])
                            t = t.fields[step.index][1]
                        else:
                            scale = sizeof(t.elem)
                            if isinstance(step.value, Imm):
                                const += step.value.value * scale
                            else:
                                dyn.append((step.value, scale))
                            t = t.elem
                    self.extra[id(ins)] = (const, tuple(dyn))
                elif ins.op == "alloca":
                    self.extra[id(ins)] = sizeof(ins.ty)
                elif ins.op in ("load", "store"):
                    self.extra[id(ins)] = sizeof(ins.ty)
                elif ins.op == "tagd" and ins.mod is not None:
                    self.extra[id(ins)] = TypeId.of(canonical(ins.mod))


class Machine:
    def __init__(self, program, config=None):
        self.program = program
        self.config = config or MachineConfig()
        cfg = self.config
        self.dpt = cfg.enable_dpt and cfg.mode != "off"
        self.mem = SparseMemory()
        self.cmt = Cmt(self.mem, cfg.cmt_base, cfg.cmt_ways, cfg.max_ways)
        self.cards = CardTables()
        self.lfsr = Lfsr16(cfg.lfsr_seed)
        self.stats = SimStats(cmt_ways=cfg.cmt_ways)
        self.pipe = None
        if cfg.uarch_enabled:
            ucfg = UarchConfig(ccache=cfg.ccache, head_policy=cfg.head_policy)
            self.pipe = Pipeline(ucfg, self.stats, cfg.cmt_ways)
        self.heap = Heap()
        self.sp = STACK_START
        self.frames = []
        self.violations = []
        self.output = bytearray()
        self.input = bytes(cfg.input)
        self.input_pos = 0
        self.steps = 0
        self.cstr_executed = 0
        self.cclr_executed = 0
        self.code = {name: _Compiled(fn) for name, fn in program.functions.items()}
        self.global_addr = {}
        self.global_extent = []  # (addr, size, name)
        addr = GLOBAL_START
        for g in program.globals:
            size = sizeof(g.ty)
            self.global_addr[g.name] = addr
            self.global_extent.append((addr, size, g.name))
            if g.init:
                self.mem.write(addr, g.init)
            addr = align(addr + max(size, 1)) + 16
        if addr > GLOBAL_END:
            raise HardAbort("globals do not fit in the global region")
        # dynamic byte-provenance oracle
        self.tainted_bytes = set()
        self.tainted_sites = set()
        self.dispatch = {
            op: getattr(self, "_op_" + op)
            for op in ("alloca", "malloc", "free", "gep", "padd", "bitcast", "load", "store",
                       "mov", "const", "iadd", "isub", "icmp", "br", "brz", "call", "ret",
                       "tagd", "xtag", "cstr", "cclr")
        }

    # -- helpers ------------------------------------------------------------

    def _where(self):
        f = self.frames[-1]
        ins = f.code.blocks[f.bi][f.ip - 1]
        return f.fn.name, f.code.labels[f.bi], f.ip - 1, ins

    def report(self, kind, ptr, detail="", continued=True):
        fn, label, idx, ins = self._where()
        self.violations.append(
            Violation(kind, fn, label, idx, ins.line, ins.op, ptr >> 48, ptr & ADDR_MASK, continued, detail)
        )

    def value(self, frame, v):
        if isinstance(v, Reg):
            try:
                return frame.regs[v.name]
            except KeyError:
                raise HardAbort(f"read of undefined register %{v.name}") from None
        if isinstance(v, Imm):
            return v.value & MASK64
        return self.global_addr[v.name]

    def _tainted(self, frame, v):
        return isinstance(v, Reg) and v.name in frame.taint

    def _set_taint(self, frame, dst, flag):
        if flag:
            frame.taint.add(dst)
        else:
            frame.taint.discard(dst)

    # -- memory with checks -------------------------------------------------

    def load(self, ptr, width):
        """Checked load; returns None when the access was suppressed."""
        addr = ptr & ADDR_MASK
        tag = ptr >> 48
        if self.dpt and tag:
            way, fault = cap.check(self.cmt, ptr, width)
            if self.pipe:
                word = self.cmt.read(tag, way) if fault is None else 0
                self.pipe.memory_access(False, tag, addr, width, way or 0, fault is None, word)
            else:
                self.stats.total_mem_insts += 1
                self.stats.tagged_mem_insts += 1
            if fault is not None:
                self.report(SPATIAL, ptr, f"load of {width} byte(s) out of bounds")
                return None
        elif self.pipe:
            self.pipe.memory_access(False, 0, addr, width)
        else:
            self.stats.total_mem_insts += 1
        if not is_mapped(addr, width):
            raise HardAbort(f"load from unmapped address {addr:#x}")
        if width == 1:
            return self.mem.read_byte(addr)
        return int.from_bytes(self.mem.read(addr, width), "little")

    def store(self, ptr, width, value, tainted=False):
        addr = ptr & ADDR_MASK
        tag = ptr >> 48
        if self.dpt and tag:
            way, fault = cap.check(self.cmt, ptr, width)
            if self.pipe:
                word = self.cmt.read(tag, way) if fault is None else 0
                self.pipe.memory_access(True, tag, addr, width, way or 0, fault is None, word)
            else:
                self.stats.total_mem_insts += 1
                self.stats.tagged_mem_insts += 1
            if fault is not None:
                self.report(SPATIAL, ptr, f"store of {width} byte(s) out of bounds")
                return False
        elif self.pipe:
            self.pipe.memory_access(True, 0, addr, width)
        else:
            self.stats.total_mem_insts += 1
        if not is_mapped(addr, width):
            raise HardAbort(f"store to unmapped address {addr:#x}")
        if width == 1:
            self.mem.write_byte(addr, value)
        else:
            self.mem.write(addr, (value & MASK64).to_bytes(8, "little")[:width])
        if self.config.track_taint:
            for a in range(addr, addr + width):
                if tainted:
                    self.tainted_bytes.add(a)
                    site = self.owner(a)
                    if site:
                        self.tainted_sites.add(site)
                else:
                    self.tainted_bytes.discard(a)
        return True

    def owner(self, addr):
        for base, size, name in self.global_extent:
            if base <= addr < base + size:
                return "@" + name
        for base, (_, size, site) in self.heap.live.items():
            if base <= addr < base + size:
                return site
        for f in self.frames:
            for base, size, site in f.allocas:
                if base <= addr < base + size:
                    return site
        return None

    # -- capability operations (also the context used by mutate/scan) -------

    def cstr(self, ptr, size):
        tag = ptr >> 48
        while True:
            w0 = self.pipe.start_way(CSTR, tag) if self.pipe else 0
            way, fault = cap.cstr(self.cmt, ptr, size, w0)
            if self.pipe:
                word = cap.encode_metadata(ptr & ADDR_MASK, size)
                self.pipe.capability_op(CSTR, tag, ptr & ADDR_MASK, w0, way or 0, fault is None, word, size)
            if fault is None:
                self.cstr_executed += 1
                return way
            self.handle_fault(fault, ptr)

    def cclr(self, ptr):
        tag = ptr >> 48
        w0 = self.pipe.start_way(CCLR, tag) if self.pipe else 0
        way, fault = cap.cclr(self.cmt, ptr, w0)
        if self.pipe:
            self.pipe.capability_op(CCLR, tag, ptr & ADDR_MASK, w0, way or 0, fault is None)
        if fault is None:
            self.cclr_executed += 1
        return fault is None

    def handle_fault(self, fault, ptr):
        if isinstance(fault, cap.CmtFull):
            old = self.cmt.num_ways
            try:
                self.cmt = cap.resize(self.cmt)
            except ResizeLimit as e:
                self.report(RESIZED, ptr, str(e), continued=False)
                raise HardAbort(str(e)) from None
            self.stats.resizes += 1
            self.stats.cmt_ways = self.cmt.num_ways
            if self.pipe:
                self.pipe.on_resize(self.cmt.num_ways)
            self.report(RESIZED, ptr, f"{old}->{self.cmt.num_ways} ways")
            return "resized"
        if isinstance(fault, cap.NotFound):
            self.report(TEMPORAL, ptr, "no metadata to clear")
            return "resumed"
        if isinstance(fault, cap.CheckFail):
            self.report(SPATIAL, ptr, "bounds check failed")
            return "suppressed"
        raise TypeError(fault)

    # -- instruction handlers ----------------------------------------------

    def _op_alloca(self, f, ins):
        size = f.code.extra[id(ins)]
        self.sp -= align(max(size, 1))
        if self.sp < STACK_END:
            raise HardAbort("stack overflow")
        f.regs[ins.dst] = self.sp
        f.allocas.append((self.sp, size, f"{f.fn.name}:%{ins.dst}"))
        f.taint.discard(ins.dst)

    def _op_malloc(self, f, ins):
        size = signed(self.value(f, ins.args[0]))
        if size < 0 or size > HEAP_END - HEAP_BASE:
            raise HardAbort(f"malloc of invalid size {size}")
        f.regs[ins.dst] = self.heap.malloc(size, f"{f.fn.name}:%{ins.dst}")
        f.taint.discard(ins.dst)

    def _op_free(self, f, ins):
        addr = self.value(f, ins.args[0]) & ADDR_MASK
        self.heap.free(addr)

    def _op_gep(self, f, ins):
        const, dyn = f.code.extra[id(ins)]
        off = const
        for v, scale in dyn:
            off += signed(self.value(f, v)) * scale
        f.regs[ins.dst] = (self.value(f, ins.args[0]) + off) & MASK64
        self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]))

    def _op_padd(self, f, ins):
        a, b = ins.args
        f.regs[ins.dst] = (self.value(f, a) + self.value(f, b)) & MASK64
        self._set_taint(f, ins.dst, self._tainted(f, a) or self._tainted(f, b))

    _op_iadd = _op_padd

    def _op_isub(self, f, ins):
        a, b = ins.args
        f.regs[ins.dst] = (self.value(f, a) - self.value(f, b)) & MASK64
        self._set_taint(f, ins.dst, self._tainted(f, a) or self._tainted(f, b))

    def _op_mov(self, f, ins):
        f.regs[ins.dst] = self.value(f, ins.args[0])
        self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]))

    _op_bitcast = _op_mov

    def _op_const(self, f, ins):
        f.regs[ins.dst] = ins.args[0].value & MASK64
        f.taint.discard(ins.dst)

    def _op_icmp(self, f, ins):
        a = self.value(f, ins.args[0])
        b = self.value(f, ins.args[1])
        p = ins.pred
        if p[0] == "u":
            r = {"ult": a < b, "ule": a <= b, "ugt": a > b, "uge": a >= b}[p]
        else:
            sa, sb = signed(a), signed(b)
            r = {"eq": a == b, "ne": a != b, "lt": sa < sb, "le": sa <= sb, "gt": sa > sb, "ge": sa >= sb}[p]
        f.regs[ins.dst] = int(r)
        self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]) or self._tainted(f, ins.args[1]))

    def _op_load(self, f, ins):
        ptr = self.value(f, ins.args[0])
        width = f.code.extra[id(ins)]
        v = self.load(ptr, width)
        f.regs[ins.dst] = 0 if v is None else v
        if self.config.track_taint:
            a = ptr & ADDR_MASK
            hit = v is not None and any(x in self.tainted_bytes for x in range(a, a + width))
            self._set_taint(f, ins.dst, hit)

    def _op_store(self, f, ins):
        val, p = ins.args
        self.store(self.value(f, p), f.code.extra[id(ins)], self.value(f, val), self._tainted(f, val))

    def _jump(self, f, label):
        f.bi = f.code.label_index[label]
        f.ip = 0

    def _op_br(self, f, ins):
        self._jump(f, ins.targets[0])

    def _op_brz(self, f, ins):
        c = self.value(f, ins.args[0])
        self._jump(f, ins.targets[0] if c == 0 else ins.targets[1])

    def _op_call(self, f, ins):
        args = [self.value(f, a) for a in ins.args]
        if ins.callee in self.code:
            code = self.code[ins.callee]
            nf = Frame(code.fn, code, self.sp, ins.dst)
            for (p, _), v, a in zip(code.fn.params, args, ins.args):
                nf.regs[p] = v
                if self._tainted(f, a):
                    nf.taint.add(p)
            if len(self.frames) > 10_000:
                raise HardAbort("call depth limit exceeded")
            self.frames.append(nf)
            return
        r = getattr(self, "_intrinsic_" + ins.callee.lstrip("_"))(f, ins, args)
        if ins.dst:
            f.regs[ins.dst] = r & MASK64
            if ins.callee == "__mutate_ptr":
                self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]))
            else:
                f.taint.discard(ins.dst)

    def _op_ret(self, f, ins):
        v = self.value(f, ins.args[0]) if ins.args else 0
        t = bool(ins.args) and self._tainted(f, ins.args[0])
        self._return(v, t)

    def _return(self, v, tainted=False):
        f = self.frames.pop()
        self.sp = f.sp_base
        if self.frames and f.ret_dst:
            caller = self.frames[-1]
            caller.regs[f.ret_dst] = v
            self._set_taint(caller, f.ret_dst, tainted)
        self.last_return = v

    def _op_tagd(self, f, ins):
        ptr = self.value(f, ins.args[0])
        if self.dpt:
            mod = StackPointer(self.sp) if ins.mod is None else f.code.extra[id(ins)]
            ptr = tagd(ptr, mod, self.lfsr)
        f.regs[ins.dst] = ptr
        self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]))

    def _op_xtag(self, f, ins):
        f.regs[ins.dst] = self.value(f, ins.args[0]) & ADDR_MASK
        self._set_taint(f, ins.dst, self._tainted(f, ins.args[0]))

    def _op_cstr(self, f, ins):
        ptr = self.value(f, ins.args[0])
        size = self.value(f, ins.args[1])
        if self.dpt and ptr >> 48:
            self.cstr(ptr, size)

    def _op_cclr(self, f, ins):
        ptr = self.value(f, ins.args[0])
        if self.dpt and ptr >> 48:
            if not self.cclr(ptr):
                self.handle_fault(cap.NotFound(ptr >> 48, ptr & ADDR_MASK), ptr)

    # -- intrinsics ---------------------------------------------------------

    def _intrinsic_input(self, f, ins, args):
        ptr = args[0]
        if len(args) == 2:
            n = signed(args[1])
            if n < 0:
                raise HardAbort("input with negative length")
            data = self.input[self.input_pos : self.input_pos + n]
            self.input_pos += len(data)
            data = data + bytes(n - len(data))
        else:
            end = self.input.find(b"\n", self.input_pos)
            end = len(self.input) if end < 0 else end
            data = self.input[self.input_pos : end]
            self.input_pos = min(end + 1, len(self.input))
        for i, b in enumerate(data):
            self.store((ptr + i) & MASK64, 1, b, tainted=True)
        return len(data)

    def _intrinsic_print(self, f, ins, args):
        ptr, n = args[0], signed(args[1])
        if n < 0:
            raise HardAbort("print with negative length")
        for i in range(n):
            v = self.load((ptr + i) & MASK64, 1)
            self.output.append(0 if v is None else v)
        return n

    def _intrinsic_memfill(self, f, ins, args):
        ptr, byte, n = args[0], args[1] & 0xFF, signed(args[2])
        if n < 0:
            raise HardAbort("memfill with negative length")
        t = self._tainted(f, ins.args[1])
        for i in range(n):
            self.store((ptr + i) & MASK64, 1, byte, t)
        return n

    def _intrinsic_memcpy(self, f, ins, args):
        dst, src, n = args[0], args[1], signed(args[2])
        if n < 0:
            raise HardAbort("memcpy with negative length")
        for i in range(n):
            s = (src + i) & MASK64
            v = self.load(s, 1)
            t = v is not None and self.config.track_taint and (s & ADDR_MASK) in self.tainted_bytes
            self.store((dst + i) & MASK64, 1, 0 if v is None else v, t)
        return n

    def _intrinsic_mutate_ptr(self, f, ins, args):
        ptr, size = args
        if not self.dpt:
            return ptr
        self.stats.mutate_calls += 1
        before = self.cstr_executed
        out = cap.mutate_ptr(ptr, size, self, self.cards)
        self.stats.mutate_cstrs += self.cstr_executed - before
        return out

    def _intrinsic_scan_clear(self, f, ins, args):
        if not self.dpt:
            return 0
        base = args[0] & ADDR_MASK
        if len(args) == 2:
            size = args[1]
        else:
            size = self.heap.size_of(base)
            if size is None:  # repeated free; the cclr that follows reports it
                return 0
        n = cap.scan_and_clear(base, size, self, self.cards)
        self.stats.scan_cleared += n
        return n

    # -- driver -------------------------------------------------------------

    def run(self):
        entry = self.code[self.program.entry]
        self.frames.append(Frame(entry.fn, entry, self.sp, None))
        self.last_return = 0
        exit_state = None
        limit = self.config.max_steps
        pipe = self.pipe
        dispatch = self.dispatch
        try:
            while self.frames:
                f = self.frames[-1]
                instrs = f.code.blocks[f.bi]
                if f.ip >= len(instrs):
                    if f.bi + 1 < len(f.code.blocks):
                        f.bi += 1
                        f.ip = 0
                        continue
                    self._return(0)
                    continue
                ins = instrs[f.ip]
                f.ip += 1
                self.steps += 1
                if self.steps > limit:
                    raise HardAbort("step limit exceeded")
                if pipe:
                    before = pipe.order
                    dispatch[ins.op](f, ins)
                    if pipe.order == before:
                        pipe.instruction()
                else:
                    dispatch[ins.op](f, ins)
                self.lfsr.step()
            exit_state = {"status": "ok", "value": signed(self.last_return & MASK64)}
        except HardAbort as e:
            exit_state = {"status": "abort", "reason": str(e)}
        if pipe:
            pipe.drain()
        else:
            self.stats.instructions = self.steps
        self.stats.cmt_ways = self.cmt.num_ways
        return RunResult(exit_state, self.violations, self.stats, bytes(self.output), self)

    def program_memory(self):
        """Snapshot of the program regions (excludes the CMT)."""
        out = {}
        for lo, hi in PROGRAM_REGIONS:
            out.update(self.mem.snapshot(lo, hi))
        return out


def run(program, config=None):
    return Machine(program, config).run()
