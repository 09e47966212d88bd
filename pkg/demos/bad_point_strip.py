"""Build near-singular orbits, their synchronised frames and strips.

Sinai fixtures pass close to a disk tangency and give post-singularity frames;
pocket fixtures graze the pocket arc right after a collision and exercise the
pre-tangency mode, where x3 starts outside the strip and enters it.
"""

from semidisperse.constructions import check_fixture, make_fixtures

for kind in ("sinai", "pocket"):
    for fx in make_fixtures(kind, 3, seed=2):
        rep = check_fixture(fx)
        entry = "inside" if rep["footpoint_inside"] else f"enters at t={rep['entered_at']:.2e}"
        print(f"{kind:6s} {rep['mode']:17s} theta={rep['theta']:.2e} "
              f"LmF={rep['lmf_first']:+.1e} x3 {entry:22s} contained={rep['contained']} "
              f"stable={rep['stable']}")
