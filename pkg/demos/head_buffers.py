"""Store/clear head buffers on a stack-like workload.

Every object below shares one tag, so each cstr and cclr has to search the
same row of the metadata table.  The head buffers remember where the next free
way (for cstr) and the next object to clear (for cclr) should be.

    python3 demos/head_buffers.py
"""

from curesim.uarch import lifo_trace, replay_trace

trace = lifo_trace(500, 2)
for policy in ("adaptive", "off"):
    s, _ = replay_trace(trace, policy=policy)
    print(f"{policy:8}: avg cstr probes {s.avg_cstr_iterations:.3f}, avg cclr probes {s.avg_cclr_iterations:.3f}")

# The buffers start at way 0, so the very first cclr of the tag misses once:
# 1001 probes over 1000 clears.

print()
print("One object per frame on a 4-way row is a case where the buffers lose:")
for policy in ("adaptive", "off"):
    s, per = replay_trace(lifo_trace(6, 1), policy=policy)
    print(f"{policy:8}: per-op probes {per}")
