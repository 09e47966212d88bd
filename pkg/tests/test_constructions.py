import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semidisperse.constructions import (FALLBACK, POST, FiberCollision, NoSingularEndpoint,
                                        PreconditionViolated, build_strip, build_sync_frame,
                                        check_fixture, fibers_disjoint, foliation_chart,
                                        in_first_leg, lemma21_embed, lemma21_fuzz, lmf_check, load_fixtures,
                                        make_fixtures, random_admissible_pair,
                                        random_convex_frame, strip_contains_orbit,
                                        write_fixtures)
from semidisperse.dynamics import FlowPoint, coord
from semidisperse.singularity import trace_Sn

from conftest import PERIOD2_R

V1 = np.array([1.0, 0.0])
V2 = np.array([math.cos(1e-4), math.sin(1e-4)])


def _on_circle(res, rho):
    for p in res.points:
        assert math.hypot(p[0] - res.center[0], p[1] - res.center[1]) == pytest.approx(rho, abs=1e-9)


def test_embed_case1():
    res = lemma21_embed(60 * V1, V1, 60 * V2, V2, 0.01)
    assert res.case == "case1"
    assert res.tau1 == 0.0 and res.tau2 == pytest.approx(0.0, abs=1e-12)
    assert res.radius == pytest.approx(60.0, abs=1e-9)
    _on_circle(res, 60.0)


def test_embed_case2():
    res = lemma21_embed(V1, V1, V2, V2, 0.01)
    assert res.case == "case2"
    assert res.tau1 == pytest.approx(49.0, abs=1e-9) and res.tau2 == pytest.approx(49.0, abs=1e-9)
    assert res.radius == pytest.approx(50.0)
    assert max(abs(res.tau1), abs(res.tau2)) < 100 * 1.0
    _on_circle(res, 50.0)


def test_embed_degenerate_flat():
    q = np.array([0.3, 0.4])
    res = lemma21_embed(q, V1, q, V1, 0.01)
    assert res.case == "degenerate-flat" and res.tau1 == res.tau2 == 0.0


def test_embed_preconditions():
    with pytest.raises(PreconditionViolated):
        # converging pair: <q1 - q2, v1 - v2> < 0
        lemma21_embed(60 * V2, V1, 60 * V1, V2, 0.01)
    with pytest.raises(PreconditionViolated):
        lemma21_embed(V1, V1, 2 * V1, V1, 0.01)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-2, 1e-3, 1e-4]))
def test_embed_residuals(seed, eps0):
    res = lemma21_embed(*random_admissible_pair(np.random.default_rng(seed), eps0), eps0)
    circ, align = res.residuals()
    assert circ < 1e-9 and align < 1e-9
    assert max(abs(res.tau1), abs(res.tau2)) < 10000 * eps0
    # as a front the two shifted points are divergent: B = 1/rho >= 0
    assert res.radius > 0


def test_fuzz_tallies():
    rep = lemma21_fuzz(2000, 1e-3, seed=7)
    assert rep["cases"]["case1"] > 100 and rep["cases"]["case2"] > 100
    assert rep["tau_bound_violations"] == rep["circle_violations"] == rep["alignment_violations"] == 0


@pytest.fixture(scope="module")
def sinai_fixtures():
    return make_fixtures("sinai", 4, seed=11)


@pytest.fixture(scope="module")
def pocket_fixtures():
    return make_fixtures("pocket", 3, seed=11)


def test_sync_frame_post_mode(sinai_fixtures, sinai_table):
    assert len(sinai_fixtures) == 4
    for fx in sinai_fixtures:
        fr = build_sync_frame(sinai_table, fx.x, fx.n, eps1_floor=fx.eps1_floor)
        assert fr.mode == POST
        chk = lmf_check(fr)
        assert chk["perpendicularity"] < 1e-9
        assert chk["ok"] and chk["second"] == 0.0
        np.testing.assert_array_equal(fr.x3.v, fr.x_eps1.v)


def test_sync_frame_fallback_mode(pocket_fixtures, pocket):
    for fx in pocket_fixtures:
        fr = build_sync_frame(pocket, fx.x, fx.n, eps1_floor=fx.eps1_floor)
        assert fr.mode == FALLBACK
        assert lmf_check(fr)["ok"]


def test_non_bad_point_has_no_frame(sinai_table):
    with pytest.raises(NoSingularEndpoint):
        build_sync_frame(sinai_table, coord(sinai_table, PERIOD2_R, 0.0), 1)


@pytest.mark.parametrize("mode", [POST, FALLBACK])
def test_lmf_random_convex_frames(mode):
    rng = np.random.default_rng(99)
    for _ in range(100):
        chk = lmf_check(random_convex_frame(rng, mode))
        assert chk["ok"], chk
        assert chk["second"] == 0.0


def test_strip_landing_monotone_and_refinement(sinai_fixtures, sinai_table):
    fx = sinai_fixtures[0]
    fr = build_sync_frame(sinai_table, fx.x, 2, eps1_floor=fx.eps1_floor)
    s200 = build_strip(sinai_table, fr, n_samples=200)
    assert s200.landing_monotone()
    assert s200.landing_in_u0().all()
    s400 = build_strip(sinai_table, fr, n_samples=400)
    assert s400.area() == pytest.approx(s200.area(), rel=1e-2)


def test_zero_extent_strip(sinai_fixtures, sinai_table):
    fx = sinai_fixtures[1]
    fr = dataclasses.replace(build_sync_frame(sinai_table, fx.x, fx.n), theta=0.0)
    st_ = build_strip(sinai_table, fr, n_samples=5)
    L = st_.landing()
    assert np.all(L == L[0])
    assert st_.area() == 0.0


def test_containment_and_control(sinai_fixtures, sinai_table):
    fx = sinai_fixtures[2]
    fr = build_sync_frame(sinai_table, fx.x, fx.n)
    strip = build_strip(sinai_table, fr)
    v = strip_contains_orbit(strip)
    assert v.footpoint_inside and v.contained and v.landing_in_u0
    away = FlowPoint(fr.x3.q + 0.05 * fr.lateral, fr.x3.v)
    w = strip_contains_orbit(strip, away)
    assert not w.contained and not w.footpoint_inside


def test_fallback_orbit_enters_then_stays(pocket_fixtures):
    for fx in pocket_fixtures:
        rep = check_fixture(fx)
        assert not rep["footpoint_inside"] and rep["entered_at"] > 0
        assert rep["contained"] and rep["stable"]


def test_entry_time_in_thin_strip(pocket):
    # theta ~ 1e-7: the orbit is inside for a window shorter than a coarse grid step
    fx = make_fixtures("pocket", 2, seed=2)[1]
    fr = build_sync_frame(pocket, fx.x, fx.n, eps1_floor=fx.eps1_floor)
    rep = check_fixture(fx)
    assert rep["contained"] and rep["entered_at"] > 0
    x3 = fr.x3
    ts = np.linspace(0.0, 1.1 * rep["entered_at"], 100_001)
    first = next(t for t in ts if in_first_leg(pocket, fr, x3.q + t * x3.v))
    assert rep["entered_at"] == pytest.approx(first, abs=ts[1])


def test_fixture_round_trip(sinai_fixtures, tmp_path):
    path = tmp_path / "fx.json"
    write_fixtures(path, sinai_fixtures)
    assert load_fixtures(path) == sinai_fixtures


@pytest.fixture(scope="module")
def chart(sinai_table):
    curve = next(c for c in trace_Sn(sinai_table, 1, 1e-3) if c.source == "tangency")
    return foliation_chart(sinai_table, curve, 1e-3, n_fibers=60)


def test_foliation_velocity_constant(chart):
    for i in range(len(chart.base)):
        for s in np.linspace(-chart.extent_minus[i], chart.extent_plus[i], 7):
            assert np.abs(chart.point(i, s).v - chart.v0[i]).max() < 1e-12


def test_foliation_section_and_unit_speed(chart):
    h = 1e-6
    for i, m in enumerate(chart.base):
        y = chart.collision(i, 0.0)
        assert (y.component, y.r, y.phi) == pytest.approx((m.component, m.r, m.phi), abs=1e-12)
        s = 0.5 * (chart.extent_plus[i] - chart.extent_minus[i])
        d = (chart.carrier(i, s + h) - chart.carrier(i, s - h)) / (2 * h)
        assert np.hypot(*d) == pytest.approx(1.0, abs=1e-9)


def test_foliation_fibers_disjoint(chart):
    assert fibers_disjoint(chart) > 0


def test_foliation_preconditions(pocket, sinai_table):
    corner = next(c for c in trace_Sn(pocket, 1, 1e-3) if c.source == "corner")
    with pytest.raises(PreconditionViolated):
        foliation_chart(pocket, corner, 1e-3)
    curve = next(c for c in trace_Sn(sinai_table, 1, 1e-3) if c.source == "tangency")
    with pytest.raises(FiberCollision):
        foliation_chart(sinai_table, curve, 0.5, n_fibers=10, strict=True)
