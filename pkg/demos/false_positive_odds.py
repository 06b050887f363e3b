"""How many runs until a stale pointer's tag collides with a fresh one?

Each reallocation draws a new 16-bit tag.  A dangling access goes unnoticed
only when the new tag equals the old one, with probability 2^-16.  The number
of independent attempts needed before an attacker has even odds is the
smallest n with 1 - (1 - 2^-16)^n >= 1/2.

    python3 demos/false_positive_odds.py
"""

import math

q = 1 - 2 ** -16
real = math.log(0.5) / math.log(q)
n = math.ceil(real)
print(f"crossing point      {real:.3f}")
print(f"smallest integer n  {n}")
for k in (n - 1, n):
    print(f"  P(success within {k}) = {1 - q ** k:.7f}")
