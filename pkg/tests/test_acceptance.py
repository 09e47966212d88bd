"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py).
"""

import math
import time
import warnings

import numpy as np
import pytest

from semidisperse.constructions import check_fixture, lemma21_fuzz, make_fixtures
from semidisperse.diagnostics import (DiagnosticsConfig, InsufficientSamples, invariance_check,
                                      lyapunov_batch, lyapunov_dispersion, tail_estimate)
from semidisperse.dynamics import (CollisionCoord, FlowPoint, SingularEncounter, collision_map,
                                   involution, orbit, sample_nu, to_flow)
from semidisperse.geometry import MAT
from semidisperse.singularity import (grid_agreement, hausdorff, involution_image, slope_signs,
                                      trace_Sn, z_tub)
from semidisperse.sufficiency import ansatz_sampler
from semidisperse.wavefront import WaveFront, expansion, kappa_profile, propagate_collision

from conftest import ACCEPTANCE
from oracles import traced_curvature, two_ray_expansion

pytestmark = pytest.mark.acceptance


def verdict(num, title, ok, detail):
    ACCEPTANCE.append((num, title, bool(ok), detail))
    assert ok, f"criterion {num} ({title}): {detail}"


def _sample(table, n, seed):
    comp, r, phi = sample_nu(table, n, np.random.default_rng(seed))
    return [CollisionCoord(int(c), float(a), float(b)) for c, a, b in zip(comp, r, phi)]


def _coord_gap(a, b, L):
    if a.component != b.component:
        return math.inf
    dr = abs(a.r - b.r)
    return max(min(dr, L - dr), abs(math.remainder(a.phi - b.phi, 2 * math.pi)))


def test_01_reversibility(tables):
    t0 = time.perf_counter()
    worst, skipped = 0.0, 0
    for k, t in enumerate(tables.values()):
        L = t.total_boundary_length
        for x in _sample(t, 10_000, 100 + k):
            try:
                back = collision_map(t, involution(t, collision_map(t, x)))
            except SingularEncounter:
                skipped += 1
                continue
            worst = max(worst, _coord_gap(back, involution(t, x), L))
    dt = time.perf_counter() - t0
    verdict(1, "T(-Tx) = -x", worst < 1e-9 and dt < 10 and skipped == 0,
            f"max gap {worst:.2e} on 3x10^4 samples, {skipped} singular, {dt:.1f} s")


def test_02_invariant_measure(sinai_table):
    t0 = time.perf_counter()
    rep = invariance_check(sinai_table, 1_000_000, seed=2)
    dt = time.perf_counter() - t0
    p = min(rep["ks_r"]["pvalue"], rep["ks_phi"]["pvalue"])
    verdict(2, "nu is T-invariant", p > 0.01 and dt < 60,
            f"KS p-values r {rep['ks_r']['pvalue']:.3f}, phi {rep['ks_phi']['pvalue']:.3f} "
            f"(chi2 p {rep['chi2']['pvalue']:.3f}), {dt:.1f} s")


def test_03_wavefront_oracle(sinai_table):
    P = sinai_table.packed
    rng = np.random.default_rng(3)
    worst, checked = 0.0, 0
    for m in _sample(sinai_table, 12_000, 31):
        if checked == 10_000:
            break
        B0 = 0.0 if rng.random() < 0.3 else 10 ** rng.uniform(-2, 2)
        rows = orbit(sinai_table, m, 50)
        mats = np.flatnonzero(P[rows[:, 1].astype(int), MAT] == 1)
        if not len(mats):
            continue
        try:
            D = expansion(sinai_table, m, int(mats[0]) + 1, B0).jacobian
        except SingularEncounter:
            continue
        d = two_ray_expansion(sinai_table, WaveFront(to_flow(sinai_table, m), B0), 1,
                              1e-7 / max(1.0, math.sqrt(D)))
        if d is None:
            continue
        worst = max(worst, abs(d / D - 1))
        checked += 1
    # head-on flat front at the period-2 point (0.9, 0.5)
    front = WaveFront(FlowPoint((0.05, 0.5), (-1.0, 0.0)), 0.0)
    B_t = traced_curvature(sinai_table, front, 0.2)
    kick_oracle = B_t / (1 - 0.05 * B_t)
    kick = propagate_collision(front, 2.5, 0.0).B
    ok = checked == 10_000 and worst < 1e-6 and abs(kick_oracle / 5 - 1) < 1e-6 and kick == 5.0
    verdict(3, "D^1 and curvature kick", ok,
            f"max rel error {worst:.2e} on {checked} collisions; kick {kick} vs traced {kick_oracle:.8f}")


def test_04_expansion_order(sinai_table):
    rng = np.random.default_rng(4)
    checked, low, unordered = 0, math.inf, 0
    for m in _sample(sinai_table, 1_100, 41):
        if checked == 1_000:
            break
        try:
            rec = expansion(sinai_table, m, 20, float(rng.uniform(0, 50)))
            k0, kd = kappa_profile(sinai_table, m, 20, 1e-2)
        except SingularEncounter:
            continue
        D = np.cumprod([leg[4] for leg in rec.legs])
        low = min(low, float(D.min()))
        unordered += not (np.all(np.diff(k0) >= 0) and np.all(np.diff(kd) >= 0)
                          and np.all(kd >= 1.0) and np.all(kd <= k0))
        checked += 1
    verdict(4, "expansion and kappa ordering", checked == 1_000 and low >= 1 - 1e-12 and unordered == 0,
            f"{checked} orbits, min D^n {low:.6f}, {unordered} ordering violations")


def test_05_flat_front_minimal(sinai_table):
    grid = np.linspace(0.0, 100.0, 101)[1:]
    checked, worst = 0, math.inf
    for m in _sample(sinai_table, 1_100, 51):
        if checked == 1_000:
            break
        try:
            D0 = np.cumprod([leg[4] for leg in expansion(sinai_table, m, 20).legs])
            DB = [np.cumprod([leg[4] for leg in expansion(sinai_table, m, 20, B).legs]) for B in grid]
        except SingularEncounter:
            continue
        worst = min(worst, float(np.min(np.array(DB) / D0)))
        checked += 1
    verdict(5, "flat front minimises D^n", checked == 1_000 and worst >= 1 - 1e-12,
            f"{checked} orbits x n<=20 x 100 curvatures, min D^n(B)/D^n(0) = {worst:.6f}")


def test_06_lemma21_fuzz():
    rep = lemma21_fuzz(100_000, 1e-3, seed=6)
    viol = rep["tau_bound_violations"] + rep["circle_violations"] + rep["alignment_violations"]
    c = rep["cases"]
    verdict(6, "two-point embedding", viol == 0 and c["case1"] >= 10_000 and c["case2"] >= 10_000,
            f"{viol} violations, cases {c}, max |tau| {rep['max_abs_tau']:.3f}, "
            f"residuals {rep['max_circle_residual']:.1e}/{rep['max_alignment_residual']:.1e}")


def test_07_singularity_structure(sinai_table):
    res = 1e-3
    s1 = trace_Sn(sinai_table, 1, res)
    sm1 = trace_Sn(sinai_table, -1, res)
    g = grid_agreement(sinai_table, s1, n=2000)
    constant = all(len(set(slope_signs(cv))) == 1 for cv in s1 + sm1)
    H = hausdorff(np.vstack(involution_image(sinai_table, s1)), np.vstack([c.polyline for c in sm1]))
    ok = g["coverage"] >= 0.99 and g["false_claims"] == 0 and constant and H <= 2 * res
    verdict(7, "S_1 structure", ok,
            f"{len(s1)} curves, coverage {g['coverage']:.4f} of {g['grid_cells']} cells, "
            f"{g['false_claims']} false claims, constant slope sign {constant}, Hausdorff {H:.1e}")


def test_08_ztub_symmetry(tables):
    worst = 0.0
    for k, t in enumerate(tables.values()):
        for x in _sample(t, 1_000, 80 + k):
            gap = abs(z_tub(t, involution(t, collision_map(t, x))).value - z_tub(t, x).value)
            worst = max(worst, gap)
    verdict(8, "z_tub(-Tx) = z_tub(x)", worst < 1e-6, f"max gap {worst:.1e} on 3x10^3 samples")


def test_09_strip_containment():
    fixtures = make_fixtures("sinai", 10, seed=9) + make_fixtures("pocket", 10, seed=9)
    reps = [check_fixture(f) for f in fixtures]
    keys = ("lmf_ok", "footpoint_ok", "contained", "landing_in_u0", "stable")
    good = sum(all(r[k] for k in keys) for r in reps)
    modes = {r["mode"] for r in reps}
    ok = len(reps) >= 20 and good == len(reps) and len(modes) == 2
    verdict(9, "strip containment", ok,
            f"{good}/{len(reps)} fixtures pass every check, modes {sorted(modes)}, "
            f"min LmF product {min(r['lmf_first'] for r in reps):.1e}")


def test_10_tail_trend(sinai_table):
    cfg = DiagnosticsConfig(deltas=(1e-2, 5e-3, 2.5e-3, 1.25e-3), samples=1_000_000, seed=7)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientSamples)
        rep = tail_estimate(sinai_table, None, cfg)
    dt = time.perf_counter() - t0
    curve = ", ".join(f"{d.delta:g}: {d.ratio:.4f}+-{d.ratio_stderr:.4f}" for d in rep.per_delta)
    verdict(10, "tail ratio decreasing", rep.decreasing_within(2.0) and dt < 1800,
            f"ratio nu/delta {curve}; {dt:.0f} s")


def test_11_lyapunov_contrast(sinai_table, square):
    N = 100_000
    sin = lyapunov_dispersion(lyapunov_batch(sinai_table, _sample(sinai_table, 100, 110), N))
    sq = lyapunov_batch(square, _sample(square, 20, 111), N)
    worst_sq = max(abs(r.exponent) for r in sq)
    ok = sin["mean"] > 0.1 and sin["relative_dispersion"] < 0.05 and worst_sq < 10 * math.log(N) / N
    verdict(11, "Lyapunov contrast", ok,
            f"Sinai mean {sin['mean']:.4f}, dispersion {sin['relative_dispersion']:.4f}; "
            f"square max |lambda| {worst_sq:.1e}")


def test_12_ansatz(sinai_table, square):
    s = ansatz_sampler(sinai_table, 10_000, 200, seed=12)
    q = ansatz_sampler(square, 10_000, 200, seed=12)
    ok = s["sufficient_fraction"] >= 0.999 and q["sufficient_fraction"] == 0 and q["undetermined_fraction"] == 1
    verdict(12, "Ansatz sampler", ok,
            f"Sinai {s['sufficient_fraction']:.4f} sufficient; square {q['sufficient_fraction']:.2f} "
            f"sufficient, {q['undetermined_fraction']:.2f} undetermined")
