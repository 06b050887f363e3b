"""Taint-driven selective protection.

Only the buffer that receives external input is worth tagging.  The taint
analysis builds a points-to graph, marks everything reachable from the input
intrinsic and protects only the allocation sites whose subgraph is tainted.

    python3 demos/selective_protection.py
"""

from curesim import MachineConfig, instrument, make_plan, parse_file, run
from curesim.taint import analyze
from _paths import CWE

for name, data in (("hello_overflow", b"A" * 11), ("ho_input", b"A" * 9), ("so_indirect", b"A" * 17)):
    program = parse_file(CWE / f"{name}.mir")
    graph, protected = analyze(program)
    full, _ = make_plan(program, "dpt-f")
    print(f"{name}: {len(full.protected_sites(program))} sites in full DPT-F, "
          f"{len(protected)} after taint: {sorted(protected)}")
    for taint in (False, True):
        plan, g = make_plan(program, "dpt-f", taint=taint)
        r = run(instrument(program, plan, g), MachineConfig(mode="dpt-f", input=data))
        label = "selective" if taint else "full     "
        print(f"  {label} violations: {r.kinds() or 'none'}, instructions {r.stats.instructions}")
    print()
