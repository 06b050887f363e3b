"""A dangling pointer into a block that malloc handed out again.

The allocator reuses the freed block for the next request of the same size.
The new owner gets a fresh tag because the LFSR has moved on, so the old
pointer's tag no longer has metadata and its access fails the check.

    python3 demos/use_after_reallocation.py [SEED]
"""

import sys

from curesim import MachineConfig, ProtectionPlan, instrument, parse_file
from curesim.machine import Machine
from curesim.tagging import get_tag, xtag
from _paths import CWE


class TagLog(Machine):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.tags = []

    def _op_tagd(self, f, ins):
        super()._op_tagd(f, ins)
        p = f.regs[ins.dst]
        self.tags.append((xtag(p), get_tag(p)))


seed = int(sys.argv[1], 0) if len(sys.argv) > 1 else 0xACE1
code = instrument(parse_file(CWE / "uaf_realloc.mir"), ProtectionPlan("dpt-h"))
m = TagLog(code, MachineConfig(mode="dpt-h", lfsr_seed=seed))
r = m.run()
for (addr, tag), who in zip(m.tags, ("first owner", "second owner")):
    print(f"{who:12}: address {addr:#x} tag {tag:#06x}")
print("violations:", [f"{v.kind} on tag {v.tag:#06x}" for v in r.violations] or "none")
