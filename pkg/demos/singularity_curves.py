"""Trace S_1 and S_-1 on the three reference tables and write them as CSV.

Plot columns r and phi of the output grouped by curve_id to see the curves.
"""

import sys
from pathlib import Path

import numpy as np

from semidisperse.geometry import REFERENCE_TABLES
from semidisperse.singularity import (export_curves, hausdorff, involution_image, slope_signs,
                                      trace_Sn)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

for name, make in REFERENCE_TABLES.items():
    table = make()
    fwd = trace_Sn(table, 1, 1e-3)
    back = trace_Sn(table, -1, 1e-3)
    export_curves(fwd, out / f"{name}_S1.csv")
    export_curves(back, out / f"{name}_S-1.csv")
    signs = {int(s) for cv in fwd for s in np.unique(slope_signs(cv))}
    H = hausdorff(np.vstack(involution_image(table, fwd)), np.vstack([c.polyline for c in back]))
    sources = sorted({cv.source for cv in fwd})
    print(f"{name:7s} {len(fwd):3d} curves ({', '.join(sources)}), slope signs {signs}, "
          f"S_-1 vs mirrored S_1: {H:.1e}")
