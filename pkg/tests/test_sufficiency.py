import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semidisperse.dynamics import CollisionCoord, FlowPoint, coord, involution, sample_nu, to_flow
from semidisperse.geometry import sinai
from semidisperse.singularity import NoSingularityCurves, trace_Sn
from semidisperse.sufficiency import (BranchBudgetExceeded, ansatz_sampler, is_future_sufficient,
                                      is_past_sufficient, is_sufficient_segment, write_report)

from conftest import PERIOD2_R

DIAG = np.array([1.0, 1.0]) / math.sqrt(2)


def test_period2_segment_is_sufficient(sinai_table):
    x = to_flow(sinai_table, coord(sinai_table, PERIOD2_R, 0.0))
    v = is_sufficient_segment(sinai_table, x, (0.0, 0.4))
    assert v.sufficient
    t, comp, r = v.witnesses[0]
    assert t == pytest.approx(0.2) and comp == 0
    assert r == pytest.approx(sinai_table.nearest_r((0.1, 0.5)), abs=1e-12)


def test_square_never_sufficient(square, rng):
    for _ in range(50):
        a = rng.uniform(0, 2 * math.pi)
        x = FlowPoint(rng.uniform(0.05, 0.95, 2), np.array([math.cos(a), math.sin(a)]))
        assert is_sufficient_segment(square, x, (0.0, 20.0)).status == "insufficient-by-horizon"
        assert is_future_sufficient(square, x, 50).status == "undetermined"


def test_pocket_witness_on_arc(pocket):
    v = is_sufficient_segment(pocket, FlowPoint(np.array([0.5, 0.5]), DIAG), (0.0, 1.0))
    assert v.sufficient
    t, comp, r = v.witnesses[0]
    assert pocket.components[comp].kind == "arc"
    assert t == pytest.approx(0.5 * math.sqrt(2) - 0.3, abs=1e-12)
    hit = np.array([1.0, 1.0]) - 0.3 * DIAG
    assert r == pytest.approx(pocket.nearest_r(hit), abs=1e-9)
    # the same orbit cut short of the arc is not sufficient
    assert not is_sufficient_segment(pocket, FlowPoint(np.array([0.5, 0.5]), DIAG), (0.0, 0.4)).sufficient


@pytest.mark.parametrize("k", range(1, 7))
def test_two_branches_per_corner(square, k):
    # the diagonal bounces from corner to corner
    b = 0.5 * math.sqrt(2) + math.sqrt(2) * (k - 1) + 0.1
    v = is_sufficient_segment(square, FlowPoint(np.array([0.5, 0.5]), DIAG), (0.0, b))
    assert v.branches_explored == 2 ** k


def test_branch_budget(square):
    b = 0.5 * math.sqrt(2) + 6 * math.sqrt(2) + 0.1
    with pytest.raises(BranchBudgetExceeded):
        is_sufficient_segment(square, FlowPoint(np.array([0.5, 0.5]), DIAG), (0.0, b))
    assert is_future_sufficient(square, FlowPoint(np.array([0.5, 0.5]), DIAG), 20).status == "undetermined"


def test_bad_span():
    with pytest.raises(ValueError):
        is_sufficient_segment(sinai(), FlowPoint(np.array([0.05, 0.05]), DIAG), (1.0, 1.0))


def test_tangential_arc_hits_are_not_witnesses():
    t = sinai(0.25)
    graze = is_future_sufficient(t, FlowPoint(np.array([0.0, 0.25]), np.array([1.0, 0.0])), 10)
    assert graze.status == "undetermined" and graze.tangential_arc_hits > 0
    miss = is_future_sufficient(t, FlowPoint(np.array([0.0, 0.2]), np.array([1.0, 0.0])), 10)
    assert miss.status == "undetermined" and miss.tangential_arc_hits == 0


def test_past_is_future_of_reversed(pocket):
    comp, r, phi = sample_nu(pocket, 1000, np.random.default_rng(2))
    for c, a, b in zip(comp, r, phi):
        m = CollisionCoord(int(c), float(a), float(b))
        p = is_past_sufficient(pocket, m, 4)
        f = is_future_sufficient(pocket, involution(pocket, m), 4)
        assert (p.status, p.witnesses, p.branches_explored) == (f.status, f.witnesses, f.branches_explored)


@given(st.integers(0, 10**6), st.integers(1, 15), st.integers(1, 30))
def test_horizon_monotone(pocket, seed, h, extra):
    comp, r, phi = sample_nu(pocket, 1, np.random.default_rng(seed))
    m = CollisionCoord(int(comp[0]), float(r[0]), float(phi[0]))
    if is_future_sufficient(pocket, m, h).sufficient:
        assert is_future_sufficient(pocket, m, h + extra).sufficient


def test_sinai_future_sufficiency_frequency(sinai_table):
    comp, r, phi = sample_nu(sinai_table, 500, np.random.default_rng(4))
    hits = sum(is_future_sufficient(sinai_table, CollisionCoord(int(c), a, b), 100).sufficient
               for c, a, b in zip(comp, r, phi))
    assert hits / 500 > 0.98


def test_ansatz_square_all_undetermined(square):
    rep = ansatz_sampler(square, 300, 50, seed=1)
    assert rep["sufficient_fraction"] == 0.0
    assert rep["undetermined_fraction"] == 1.0


def test_ansatz_sinai_small(sinai_table, tmp_path):
    rep = ansatz_sampler(sinai_table, 300, 200, seed=1)
    assert rep["sufficient_fraction"] >= 0.99
    assert sum(d["n"] for d in rep["per_curve"].values()) == 300
    write_report(rep, tmp_path / "ansatz.json")
    assert '"sufficient_fraction"' in (tmp_path / "ansatz.json").read_text()


def test_ansatz_pocket_trend(pocket):
    curves = trace_Sn(pocket, 1, 1e-3)
    fr = [ansatz_sampler(pocket, 300, h, seed=3, curves=curves)["sufficient_fraction"]
          for h in (1, 3, 10, 40)]
    assert all(a <= b for a, b in zip(fr, fr[1:]))
    assert fr[-1] > fr[0]


def test_ansatz_needs_curves(pocket):
    with pytest.raises(NoSingularityCurves):
        ansatz_sampler(pocket, 10, 5, seed=0, curves=[])
