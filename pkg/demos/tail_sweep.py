"""Small version of the bad-set tail experiment on the Sinai torus.

The ratio nu(tail)/delta should fall as delta shrinks.  Pass a sample count
as the first argument (default 1e5; the acceptance run uses 1e6).
"""

import sys
import warnings

from semidisperse.diagnostics import DiagnosticsConfig, InsufficientSamples, tail_estimate
from semidisperse.geometry import sinai

n = int(float(sys.argv[1])) if len(sys.argv) > 1 else 100_000
cfg = DiagnosticsConfig(samples=n, seed=7)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", InsufficientSamples)
    rep = tail_estimate(sinai(), None, cfg)

print("delta     n_min  tail  ratio      stderr   witness")
for d in rep.per_delta:
    print(f"{d.delta:<9g} {d.n_min:5d} {d.count_tail:5d}  {d.ratio:.5f}  {d.ratio_stderr:.5f}  "
          f"{d.count_tilde_tail:5d}  {' '.join(d.flags)}")
print("decreasing within 2 sigma:", rep.decreasing_within(2.0))
