"""Walk one stack overflow through every protection mode.

The program copies a greeting into one stack buffer and reads an unbounded
input line into a 10-byte neighbour.  Eleven input bytes run one past the end.

    python3 demos/detect_overflow.py
"""

from curesim import MachineConfig, format_program, instrument, make_plan, parse_file, run
from _paths import CWE

program = parse_file(CWE / "hello_overflow.mir")
data = b"A" * 11

print("== instrumented main under dpt-c ==")
plan, _ = make_plan(program, "dpt-c")
text = format_program(instrument(program, plan))
print("\n".join(l for l in text.splitlines() if "vulArr" in l))
print()

for mode in ("off", "dpt-h", "dpt-c", "dpt-f"):
    plan, graph = make_plan(program, mode)
    r = run(instrument(program, plan, graph), MachineConfig(enable_dpt=mode != "off", mode=mode, input=data))
    found = ", ".join(f"{v.kind} at line {v.line} ({v.detail})" for v in r.violations) or "nothing"
    print(f"{mode:6} -> {found}")

# Heap-only protection never tags the stack buffer, so the overflow goes
# unseen there; every mode that tags stack objects suppresses the stray byte.
