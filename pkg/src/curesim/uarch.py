"""Timing and statistics model of the capability-execution pipeline.

The model only observes: the machine performs every functional CMT
operation itself and reports the outcome (way found, success) here.  The
model turns those outcomes into port traffic, cycles and counters.
"""

from collections import deque
from dataclasses import dataclass, fields

from .capability import Cmt, cclr as cmt_cclr, cstr as cmt_cstr, decode_metadata, encode_metadata

CHECK_LOAD = "CheckLoad"
CHECK_STORE = "CheckStore"
CSTR = "Cstr"
CCLR = "Cclr"
CHECKS = (CHECK_LOAD, CHECK_STORE)

S_INIT = "S_INIT"
S_READY = "S_READY"
S_WAIT = "S_WAIT"
S_DONE = "S_DONE"

_ALLOWED = {
    S_INIT: (S_READY, S_DONE),
    S_READY: (S_WAIT,),
    S_WAIT: (S_READY, S_DONE),
    S_DONE: (),
}

STACK_THRESHOLD = 1 << 46
BUFFER_ENTRIES = 256


def classify_address(addr):
    return "stack" if addr >= STACK_THRESHOLD else "heap"


class CapTask:
    __slots__ = ("kind", "tag", "address", "size", "start_way", "current_way", "iteration_count",
                 "probes", "success", "word", "need_cc", "order", "state", "history")

    def __init__(self, kind, tag, address, size, order, start_way=0, probes=0, success=True, word=0):
        self.kind = kind
        self.tag = tag
        self.address = address
        self.size = size
        self.order = order
        self.start_way = start_way
        self.current_way = start_way
        self.iteration_count = 0
        self.probes = probes
        self.success = success
        self.word = word
        self.need_cc = True
        self.state = S_INIT
        self.history = [S_INIT]

    def move(self, state):
        if state not in _ALLOWED[self.state]:
            raise RuntimeError(f"illegal transition {self.state} -> {state}")
        self.state = state
        self.history.append(state)

    def __repr__(self):
        return f"CapTask({self.kind}, tag={self.tag:#06x}, {self.state}, it={self.iteration_count})"


class CCache:
    """256-entry direct-mapped cache of metadata words, indexed by tag[7:0]."""

    ENTRIES = 256

    def __init__(self):
        self.valid = [False] * self.ENTRIES
        self.meta_hi = [0] * self.ENTRIES
        self.word = [0] * self.ENTRIES

    def lookup(self, tag, address, width):
        i = tag & 0xFF
        if not self.valid[i] or self.meta_hi[i] != tag >> 8:
            return False
        base, size = decode_metadata(self.word[i])
        return base <= address and address + width <= base + size

    def fill(self, tag, word):
        i = tag & 0xFF
        self.valid[i] = True
        self.meta_hi[i] = tag >> 8
        self.word[i] = word

    def invalidate(self, tag, base):
        i = tag & 0xFF
        if self.valid[i] and self.meta_hi[i] == tag >> 8 and self.word[i] >> 16 == base:
            self.valid[i] = False
            return True
        return False

    @property
    def size_bits(self):
        return self.ENTRIES * (1 + 8 + 64)


class HeadBuffers:
    """Store/clear head buffers.  policy: adaptive, stack, heap or off."""

    def __init__(self, num_ways=4, policy="adaptive"):
        if policy not in ("adaptive", "stack", "heap", "off"):
            raise ValueError(f"unknown head-buffer policy {policy!r}")
        self.policy = policy
        self.num_ways = num_ways
        self.shb = [0] * BUFFER_ENTRIES
        self.chb = [0] * BUFFER_ENTRIES

    def start_way(self, kind, tag):
        if self.policy == "off" or kind in CHECKS:
            return 0
        buf = self.shb if kind == CSTR else self.chb
        return buf[tag & 0xFF] % self.num_ways

    def after_cstr(self, tag, way):
        if self.policy != "off":
            self.shb[tag & 0xFF] = (way + 1) % self.num_ways

    def after_cclr(self, tag, way, address):
        if self.policy == "off":
            return
        cls = classify_address(address) if self.policy == "adaptive" else self.policy
        step = -1 if cls == "stack" else 1
        self.chb[tag & 0xFF] = (way + step) % self.num_ways

    def renormalize(self, num_ways):
        self.num_ways = num_ways
        self.shb = [w % num_ways for w in self.shb]
        self.chb = [w % num_ways for w in self.chb]


@dataclass
class SimStats:
    total_mem_insts: int = 0
    tagged_mem_insts: int = 0
    ccache_hits: int = 0
    ccache_misses: int = 0
    cap_requests: int = 0
    cstr_iterations_sum: int = 0
    cstr_iterations_count: int = 0
    cclr_iterations_sum: int = 0
    cclr_iterations_count: int = 0
    check_iterations: int = 0
    dep_stall_cycles: int = 0
    port_conflict_cycles: int = 0
    cycles: int = 0
    faults: int = 0
    instructions: int = 0
    resizes: int = 0
    cmt_ways: int = 0
    mutate_calls: int = 0
    mutate_cstrs: int = 0
    scan_cleared: int = 0

    def to_dict(self):
        out = {}
        for f in fields(self):
            parts = f.name.split("_")
            out[parts[0] + "".join(p.title() for p in parts[1:])] = getattr(self, f.name)
        return out

    @property
    def avg_cstr_iterations(self):
        return self.cstr_iterations_sum / self.cstr_iterations_count if self.cstr_iterations_count else 0.0

    @property
    def avg_cclr_iterations(self):
        return self.cclr_iterations_sum / self.cclr_iterations_count if self.cclr_iterations_count else 0.0

    @property
    def ccache_hit_rate(self):
        n = self.ccache_hits + self.ccache_misses
        return self.ccache_hits / n if n else 0.0


@dataclass
class UarchConfig:
    ccache: bool = True
    head_policy: str = "adaptive"
    rob_size: int = 96
    record_commits: bool = False


class Pipeline:
    """Single data port shared by regular accesses and capability probes."""

    def __init__(self, config=None, stats=None, num_ways=4):
        self.config = config or UarchConfig()
        self.stats = stats if stats is not None else SimStats()
        self.ccache = CCache()
        self.heads = HeadBuffers(num_ways, self.config.head_policy)
        self.num_ways = num_ways
        self.rob = deque()
        self.active = []  # capability tasks not yet done, program order
        self.regular = 0
        self.order = 0
        self.commit_log = [] if self.config.record_commits else None

    # -- submission ---------------------------------------------------------

    def _issue(self, task):
        while len(self.rob) >= self.config.rob_size:
            self.cycle_step()
        self.rob.append(task)
        self.order += 1

    def instruction(self):
        """A non-memory instruction."""
        self.stats.instructions += 1
        self._issue(None)
        self.cycle_step()

    def start_way(self, kind, tag):
        return self.heads.start_way(kind, tag)

    def memory_access(self, store, tag, address, width, found_way=0, success=True, word=0):
        """A load/store.  For tagged ones the caller passes the functional
        check outcome (way where metadata was found, scanning from way 0)."""
        st = self.stats
        st.instructions += 1
        st.total_mem_insts += 1
        self.regular += 1
        task = CapTask(CHECK_STORE if store else CHECK_LOAD, tag, address, width, self.order)
        if not tag:
            task.move(S_DONE)
            task.need_cc = False
        else:
            st.tagged_mem_insts += 1
            if self.config.ccache and success and self.ccache.lookup(tag, address, width):
                st.ccache_hits += 1
                task.move(S_DONE)
                task.need_cc = False
            else:
                st.ccache_misses += 1
                task.probes = found_way + 1 if success else self.num_ways
                task.success = success
                task.word = word
                task.move(S_READY)
                self.active.append(task)
        self._issue(task)
        self.cycle_step()
        return task

    def capability_op(self, kind, tag, address, start_way, way, success, word=0, size=0):
        """A cstr or cclr that the machine executed functionally."""
        self.stats.instructions += 1
        probes = ((way - start_way) % self.num_ways) + 1 if success else self.num_ways
        task = CapTask(kind, tag, address, size, self.order, start_way, probes, success, word)
        if success:
            if kind == CSTR:
                self.heads.after_cstr(tag, way)
            else:
                self.heads.after_cclr(tag, way, address)
        if kind == CSTR:
            self.stats.cstr_iterations_sum += probes
            self.stats.cstr_iterations_count += 1
        else:
            self.stats.cclr_iterations_sum += probes
            self.stats.cclr_iterations_count += 1
        task.move(S_READY)
        self.active.append(task)
        self._issue(task)
        self.cycle_step()
        return task

    def on_resize(self, num_ways):
        self.num_ways = num_ways
        self.heads.renormalize(num_ways)

    # -- timing -------------------------------------------------------------

    def _eligible(self):
        chosen = None
        blocked = False
        older_meta = False
        for t in self.active:
            if t.kind in CHECKS:
                if older_meta:
                    blocked = True
                    continue
            else:
                older_meta = True
            if chosen is None and t.state == S_READY:
                chosen = t
            if chosen is not None and blocked:
                break
        return chosen, blocked

    def _complete(self, task):
        if task.success:
            task.need_cc = False
            if task.kind == CSTR or task.kind in CHECKS:
                if self.config.ccache and task.word:
                    self.ccache.fill(task.tag, task.word)
            elif task.kind == CCLR and self.config.ccache:
                self.ccache.invalidate(task.tag, task.address)

    def cycle_step(self):
        st = self.stats
        task, blocked = self._eligible() if self.active else (None, False)
        if self.regular:
            self.regular -= 1
            if task is not None:
                st.port_conflict_cycles += 1
        elif task is not None:
            task.move(S_WAIT)
            st.cap_requests += 1
            task.current_way = (task.start_way + task.iteration_count) % self.num_ways
            task.iteration_count += 1
            if task.kind in CHECKS:
                st.check_iterations += 1
            if task.iteration_count >= task.probes:
                task.move(S_DONE)
                self._complete(task)
                self.active.remove(task)
            else:
                task.move(S_READY)
        if blocked:
            st.dep_stall_cycles += 1
        self._commit()
        st.cycles += 1

    def _commit(self):
        rob = self.rob
        while rob:
            head = rob[0]
            if head is not None and head.state != S_DONE:
                break
            rob.popleft()
            if head is None:
                continue
            if head.need_cc:
                self.stats.faults += 1
            elif self.commit_log is not None:
                self.commit_log.append(head.order)

    def drain(self):
        while self.rob or self.regular or self.active:
            self.cycle_step()


# ---------------------------------------------------------------------------
# trace replay


def replay_trace(trace, num_ways=4, policy="adaptive", max_ways=1024):
    """Replay (op, tag, addr, size) events (op in 'cstr'/'cclr') on a fresh CMT.

    Returns (SimStats, list of per-op iteration counts)."""
    cmt = Cmt(num_ways=num_ways, max_ways=max_ways)
    pipe = Pipeline(UarchConfig(head_policy=policy), num_ways=num_ways)
    per_op = []
    from .capability import resize
    from .tagging import make_tagged

    for op, tag, addr, size in trace:
        ptr = make_tagged(tag, addr)
        kind = CSTR if op == "cstr" else CCLR
        while True:
            w0 = pipe.start_way(kind, tag)
            if kind == CSTR:
                way, fault = cmt_cstr(cmt, ptr, size, w0)
            else:
                way, fault = cmt_cclr(cmt, ptr, w0)
            word = encode_metadata(addr, size) if kind == CSTR else 0
            task = pipe.capability_op(kind, tag, addr, w0, way if way is not None else 0,
                                      fault is None, word, size)
            per_op.append(task.probes)
            if kind == CSTR and fault is not None:
                cmt = resize(cmt)
                pipe.stats.resizes += 1
                pipe.on_resize(cmt.num_ways)
                continue
            break
    pipe.drain()
    pipe.stats.cmt_ways = cmt.num_ways
    return pipe.stats, per_op


def lifo_trace(frames, depth, tag=0x1234, top=0x7FFF_FFFF_0000, obj_size=16):
    """Nested stack frames, each holding `depth` same-tag objects freed LIFO."""
    trace = []
    for _ in range(frames):
        addrs = [top - (i + 1) * obj_size for i in range(depth)]
        trace += [("cstr", tag, a, obj_size) for a in addrs]
        trace += [("cclr", tag, a, obj_size) for a in reversed(addrs)]
    return trace
