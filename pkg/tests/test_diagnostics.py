import math
import warnings

import numpy as np
import pytest

from semidisperse.constructions import BaseNeighborhood, _aim
from semidisperse.diagnostics import (DiagnosticsConfig, InsufficientSamples, OpenOrbit,
                                      birkhoff_probe, classify_point, feature_size,
                                      invariance_check, lyapunov_batch, lyapunov_dispersion,
                                      lyapunov_estimate, sample_u0, tail_estimate)
from semidisperse.dynamics import CollisionCoord, coord, orbit, sample_nu, to_flow
from semidisperse.wavefront import WaveFront

from conftest import PERIOD2_R
from oracles import two_ray_expansion

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _quiet_tail(table, U0, cfg, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientSamples)
        return tail_estimate(table, U0, cfg, **kw)


@pytest.fixture(scope="module")
def sinai_report(sinai_table):
    cfg = DiagnosticsConfig(deltas=(2e-2, 1e-2, 5e-3), horizon=12, samples=3000, seed=5)
    return cfg, _quiet_tail(sinai_table, None, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        DiagnosticsConfig(deltas=(1e-2, -1e-3))
    with pytest.raises(ValueError):
        DiagnosticsConfig(deltas=(1e-2, 1e-3), F=lambda d: d)
    with pytest.raises(ValueError):
        DiagnosticsConfig(c3=0.0)


def test_partition_sums(sinai_report):
    cfg, rep = sinai_report
    for d in rep.per_delta:
        assert d.good + d.bad + d.undetermined == cfg.samples
        assert d.count_tail <= d.bad
        assert d.nu_tail >= 0 and d.stderr >= 0


def test_dyadic_split_sums(sinai_report):
    _, rep = sinai_report
    assert any(d.hist_tilde_n for d in rep.per_delta)
    for d in rep.per_delta:
        for n, count in d.hist_tilde_n.items():
            assert sum(v for (k, _), v in d.hist_tilde_nm.items() if k == n) == count


def test_seeded_determinism(sinai_table, sinai_report, tmp_path):
    cfg, rep = sinai_report
    again = _quiet_tail(sinai_table, None, cfg, workers=2)
    assert again.to_dict() == rep.to_dict()
    rep.write_json(tmp_path / "a.json")
    again.write_json(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_csv_rows(sinai_report, tmp_path):
    _, rep = sinai_report
    rep.write_csv(tmp_path / "tail.csv")
    lines = (tmp_path / "tail.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "delta,nu_tail_hat,stderr,ratio"
    assert len(lines) == 2 + len(rep.per_delta)


def test_shrinking_c3_never_creates_bad_points(sinai_table):
    comp, r, phi = sample_nu(sinai_table, 150, np.random.default_rng(21))
    big = DiagnosticsConfig(deltas=(1e-2,), c3=0.2, horizon=10)
    small = DiagnosticsConfig(deltas=(1e-2,), c3=0.05, horizon=10)
    for c, a, b in zip(comp, r, phi):
        y = CollisionCoord(int(c), float(a), float(b))
        if classify_point(sinai_table, y, big).status == "good":
            assert classify_point(sinai_table, y, small).status == "good"


def _square_bad_steps(square, y, N, thr):
    # no curvature, so kappa = 1 and z_tub of a link is its distance to the corner lines
    x = to_flow(square, y)
    rows = orbit(square, x, N + 1)
    q, v = x.q, x.v
    out = []
    for k in range(min(len(rows), N)):
        if rows[k, 10] != 0:
            break
        z = np.min(np.abs((CORNERS[:, 0] - q[0]) * v[1] - (CORNERS[:, 1] - q[1]) * v[0]))
        out.append(z < thr)
        q, v = rows[k, 4:6], rows[k, 6:8]
    return out


def test_square_tail_matches_corner_geometry(square):
    cfg = DiagnosticsConfig(deltas=(1e-1, 5e-2), horizon=10, samples=1500, seed=3)
    rep = _quiet_tail(square, None, cfg)
    comp, r, phi = sample_nu(square, cfg.samples, np.random.default_rng(cfg.seed))
    for d in rep.per_delta:
        bad = tail = 0
        for c, a, b in zip(comp, r, phi):
            steps = _square_bad_steps(square, CollisionCoord(int(c), a, b), cfg.horizon,
                                      cfg.c3 * d.delta)
            bad += any(steps)
            tail += any(steps[d.n_min - 1:])
        assert (d.bad, d.count_tail) == (bad, tail)


def test_square_point_near_corner_line_is_bad(square):
    # from (0.5, 0) aim past the corner (1, 1) at perpendicular distance g
    g = 3e-4
    a = math.atan2(1.0, 0.5) + math.asin(g / math.hypot(0.5, 1.0))
    phi = a - math.pi / 2
    y = coord(square, 0.5, phi)
    pc = classify_point(square, y, DiagnosticsConfig(deltas=(1e-2,), horizon=5))
    assert pc.status == "bad" and pc.n == 1
    assert pc.kappa == 1.0
    assert pc.z == pytest.approx(g, abs=1e-12)


def test_square_vertical_bounce_is_good(square):
    pc = classify_point(square, coord(square, 0.5, 0.0), DiagnosticsConfig(deltas=(1e-2,), horizon=20))
    assert pc.status == "good"


def test_period2_is_good(sinai_table):
    y = coord(sinai_table, PERIOD2_R, 0.0)
    for delta in (1e-2, 1e-3, 1e-4):
        assert classify_point(sinai_table, y, DiagnosticsConfig(deltas=(delta,), horizon=30)).status == "good"


def test_bad_at_three_fixture(sinai_table):
    # the leg after step 2 passes the disk at distance off, far below c3*delta/kappa
    rng = np.random.default_rng(0)
    off = 1e-8
    cfg = DiagnosticsConfig(deltas=(1e-2,), horizon=10)
    made = 0
    while made < 5:
        a = rng.uniform(0, 2 * math.pi)
        nrm = np.array([math.cos(a), math.sin(a)])
        y = _aim(sinai_table, np.array([0.5, 0.5]) + (0.4 + off) * nrm,
                 np.array([-nrm[1], nrm[0]]), 2, off)
        if y is None:
            continue
        pc = classify_point(sinai_table, y, cfg)
        if pc.n in (1, 2):
            continue    # an earlier link happened to be short as well
        assert pc.status == "bad" and pc.n == 3
        assert pc.z == pytest.approx(off, rel=1e-6)
        made += 1


def test_insufficient_samples_flag(sinai_table):
    cfg = DiagnosticsConfig(deltas=(1e-3,), horizon=8, samples=200, seed=1)
    with pytest.warns(InsufficientSamples):
        rep = tail_estimate(sinai_table, None, cfg)
    assert "insufficient-samples" in rep.per_delta[0].flags


def test_boundary_effect_flag(sinai_table):
    big = 1.5 * feature_size(sinai_table)
    cfg = DiagnosticsConfig(deltas=(big, 1e-2), horizon=6, samples=500, seed=1)
    rep = _quiet_tail(sinai_table, None, cfg)
    flags = {d.delta: d.flags for d in rep.per_delta}
    assert "boundary-effect" in flags[big]
    assert "boundary-effect" not in flags[1e-2]


def test_u0_sampling(sinai_table):
    U0 = BaseNeighborhood(coord(sinai_table, 0.5, 0.2), 0.1)
    comp, r, phi, mass = sample_u0(sinai_table, U0, 20_000, np.random.default_rng(0))
    assert np.all(np.hypot(r - 0.5, phi - 0.2) <= 0.1)
    # nu-mass of a small ball: pi rho^2 cos(phi0) / (2 |boundary|)
    expect = math.pi * 0.01 * math.cos(0.2) / (2 * sinai_table.material_length)
    assert mass == pytest.approx(expect, rel=0.02)


def test_lyapunov_square_vanishes(square):
    N = 10_000
    for res in lyapunov_batch(square, [coord(square, 0.3, 0.7), coord(square, 2.4, -0.2)], N):
        assert abs(res.exponent) < 10 * math.log(N) / N


def test_lyapunov_period2_matches_two_ray(sinai_table):
    m = coord(sinai_table, PERIOD2_R, 0.0)
    lam = lyapunov_estimate(sinai_table, m, 10**7, period=2).exponent
    x = to_flow(sinai_table, m)
    D = [two_ray_expansion(sinai_table, WaveFront(x, 0.0), k, h=1e-7 / 2.62 ** (k / 2))
         for k in (8, 9, 10, 11)]
    a, b, c = (D[i + 1] / D[i] for i in range(3))
    ratio = c - (c - b) ** 2 / ((c - b) - (b - a))     # Aitken limit of the per-collision factor
    assert lam == pytest.approx(math.log(ratio), abs=1e-6)
    with pytest.raises(OpenOrbit):
        lyapunov_estimate(sinai_table, m, 100, period=1)


def test_lyapunov_sinai_positive(sinai_table):
    comp, r, phi = sample_nu(sinai_table, 12, np.random.default_rng(4))
    starts = [CollisionCoord(int(c), a, b) for c, a, b in zip(comp, r, phi)]
    rep = lyapunov_dispersion(lyapunov_batch(sinai_table, starts, 20_000))
    assert rep["mean"] > 0
    assert rep["relative_dispersion"] < 0.05


def test_birkhoff_constant_function(sinai_table):
    rep = birkhoff_probe(sinai_table, None, None, ["one"], 2000, 10, seed=1)
    f = rep["functions"]["one"]
    assert f["averages"] == [1.0] * 10 and f["dispersion"] == 0.0


def test_birkhoff_sinai_cos_phi(sinai_table):
    rep = birkhoff_probe(sinai_table, coord(sinai_table, PERIOD2_R, 0.0), None,
                         ["cos_phi"], 20_000, 20, seed=2)
    assert rep["functions"]["cos_phi"]["dispersion"] < 1e-2
    assert rep["functions"]["cos_phi"]["mean"] == pytest.approx(math.pi / 4, abs=1e-2)
    assert rep["x0_future"] == "sufficient"


def test_birkhoff_square_control(square):
    # integrable: the share of bottom-side hits is fixed by the direction
    N, n = 10_000, 20
    rep = birkhoff_probe(square, None, None, ["side:0"], N, n, seed=3)
    comp, r, phi, _ = sample_u0(square, None, n, np.random.default_rng(3))
    for avg, c, a, b in zip(rep["functions"]["side:0"]["averages"], comp, r, phi):
        v = to_flow(square, CollisionCoord(int(c), a, b)).v
        assert avg == pytest.approx(abs(v[1]) / (2 * (abs(v[0]) + abs(v[1]))), abs=1e-3)
    short = birkhoff_probe(square, None, None, ["side:0"], N // 10, n, seed=3)
    assert rep["functions"]["side:0"]["dispersion"] > 0.5 * short["functions"]["side:0"]["dispersion"]


def test_birkhoff_bad_function(square):
    with pytest.raises(ValueError):
        birkhoff_probe(square, None, None, ["nope"], 10, 2)


def test_invariance_controls(sinai_table):
    ok = invariance_check(sinai_table, 100_000, seed=1)
    assert min(ok["ks_r"]["pvalue"], ok["ks_phi"]["pvalue"], ok["chi2"]["pvalue"]) > 0.01
    biased = invariance_check(sinai_table, 100_000, seed=1, sampler="uniform")
    assert biased["ks_phi"]["pvalue"] < 1e-6
    same = invariance_check(sinai_table, 10_000, seed=1, mapping="identity")
    assert same["ks_r"]["statistic"] == same["ks_phi"]["statistic"] == same["chi2"]["statistic"] == 0.0
