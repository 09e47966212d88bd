"""The head-on bouncing orbit of the Sinai torus.

Prints the orbit, the growth of a flat front along it, and the Lyapunov
exponent, which should equal log((3 + sqrt 5) / 2) per collision.
"""

import math

from semidisperse.diagnostics import lyapunov_estimate
from semidisperse.dynamics import coord, orbit
from semidisperse.geometry import sinai
from semidisperse.singularity import z_tub
from semidisperse.wavefront import expansion, kappa_profile

table = sinai()
x = coord(table, 0.0, 0.0)          # disk point (0.9, 0.5), leaving along +x

print("t      comp  q")
for row in orbit(table, x, 6):
    print(f"{row[0]:.3f}  {int(row[1]):4d}  ({row[4]:.3f}, {row[5]:.3f})")

rec = expansion(table, x, 8)
print("\nflat-front expansion after 8 events:", rec.jacobian)
k0, kd = kappa_profile(table, x, 8, 1e-3)
print("kappa_0:", k0.round(3))
print("tubular radius at x:", z_tub(table, x).value)

lam = lyapunov_estimate(table, x, 10**6, period=2).exponent
print(f"\nLyapunov exponent {lam:.9f}  vs  log(phi^2) {math.log((3 + math.sqrt(5)) / 2):.9f}")
