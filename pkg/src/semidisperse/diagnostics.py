"""Monte-Carlo measurements: good/bad classification, tail bound, Lyapunov
exponents, Birkhoff averages and invariance of the collision measure.

A point y is *bad at step n* (scale delta) when

    z_tub(-T^n y) < c3 * delta / kappa_{n, c3 delta}(y),

*good* when no step up to the horizon is bad, and *undetermined* when its orbit
meets a singularity first.  The tail set collects points bad at some
n > F(delta).  All masses are fractions of the normalised measure
dnu = cos(phi) dr dphi / (2 |material boundary|).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numba as nb
import numpy as np
from scipy import stats

from . import _kernels as K
from .constructions import BaseNeighborhood
from .dynamics import CollisionCoord, FlowPoint, orbit, sample_nu
from .geometry import KIND, LEN, MAT, OFF, RHO, Table
from .singularity import _corner_table, ztub_kernel
from .sufficiency import is_future_sufficient, is_past_sufficient
from .wavefront import DEFAULT_B_GRID

GOOD, BAD, UNDETERMINED = "good", "bad", "undetermined"
MAX_REL_STDERR = 0.25
CHUNK = 50_000

pjit = nb.njit(parallel=True, cache=True)
jit = nb.njit(cache=True)


class InsufficientSamples(UserWarning):
    """Relative standard error of an estimate exceeds 25%."""


def log2_threshold(delta: float) -> float:
    return math.log2(1.0 / delta)


@dataclass(frozen=True)
class DiagnosticsConfig:
    deltas: tuple = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
    c3: float = 0.1
    base: float = 2.0
    horizon: int = 30
    samples: int = 100_000
    seed: int = 0
    F: Callable[[float], float] = log2_threshold
    past_horizon: int = 200
    B_grid: tuple = DEFAULT_B_GRID

    def __post_init__(self):
        d = tuple(float(x) for x in self.deltas)
        if not d or min(d) <= 0:
            raise ValueError("deltas must be positive")
        if self.c3 <= 0 or self.base <= 1 or self.horizon < 1 or self.samples < 1:
            raise ValueError("need c3 > 0, base > 1, horizon >= 1, samples >= 1")
        ordered = sorted(d, reverse=True)
        Fs = [self.F(x) for x in ordered]
        if any(b < a for a, b in zip(Fs, Fs[1:])):
            raise ValueError("F must not decrease as delta decreases")
        object.__setattr__(self, "deltas", d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["F"] = getattr(self.F, "__name__", repr(self.F))
        out["deltas"] = list(self.deltas)
        out["B_grid"] = [float(b) for b in self.B_grid]
        return out


# ------------------------------------------------------------ compiled core

@jit
def _front_log_D_at(P, qx, qy, vx, vy, B, s, n):
    ex, ey = -vy, vx
    if B == 0.0:
        px, py, wx, wy = qx + s * ex, qy + s * ey, vx, vy
    else:
        a = s * B
        wx = math.cos(a) * vx + math.sin(a) * ex
        wy = math.cos(a) * vy + math.sin(a) * ey
        px, py = qx - vx / B + wx / B, qy - vy / B + wy / B
    logd, done, _, sig = K.front_log_D(P, px, py, wx, wy, B, n)
    return logd, done, sig


@jit
def _smooth_at(P, qx, qy, vx, vy, B, s, n, sig0):
    _, done, sig = _front_log_D_at(P, qx, qy, vx, vy, B, s, n)
    return done == n and sig == sig0


@jit
def _clip_offset(P, qx, qy, vx, vy, B, s, n, sig0):
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _smooth_at(P, qx, qy, vx, vy, B, mid * s, n, sig0):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return lo * s


@jit
def kappa_ladder(P, rows, n, B_grid, scales, out):
    """kappa_{n, scale} for an ascending array of scales, written to ``out``.

    Every front point evaluated for one scale is admissible for all larger
    scales, so ``out`` is nonincreasing by construction.
    """
    k0 = math.exp(K.reversed_log_D(rows, n, 0.0))
    last = rows[n - 1]
    j, rr, ph = K.involution_coord(P, int(last[1]), last[2], last[3])
    qx, qy, vx, vy = K.coord_to_state(P, j, rr, ph)
    sig0 = _front_log_D_at(P, qx, qy, vx, vy, 0.0, 0.0, n)[2]
    m = scales.shape[0]
    for d in range(m):
        out[d] = k0
    for B in B_grid:
        dB = math.exp(K.reversed_log_D(rows, n, B))
        for d in range(m):
            out[d] = min(out[d], dB)
        for d in range(m):
            smax = scales[d] / dB
            for sign in (1.0, -1.0):
                s = sign * smax
                if not _smooth_at(P, qx, qy, vx, vy, B, s, n, sig0):
                    s = _clip_offset(P, qx, qy, vx, vy, B, s, n, sig0)
                    if not _smooth_at(P, qx, qy, vx, vy, B, s, n, sig0):
                        continue
                logd = _front_log_D_at(P, qx, qy, vx, vy, B, s, n)[0]
                val = math.exp(logd)
                for dd in range(d, m):
                    out[dd] = min(out[dd], val)
    for d in range(m):
        out[d] = max(out[d], 1.0)


@jit
def _is_singular(cls):
    return cls == K.TANGENTIAL or cls == K.CORNER or cls == K.KCORNER or cls == K.NONE


@pjit
def _screen(P, corners, kinds, comp, r, phi, N, thr, B_grid, scales, Z, L, KAP):
    """Per sample: z_tub(-T^k y) for k = 1..N+1 and kappa where it can matter."""
    for i in nb.prange(r.shape[0]):
        rows = np.zeros((N + 1, 11))
        m = K.orbit_from_coord(P, comp[i], r[i], phi[i], N + 1, rows)
        if m > 0 and _is_singular(int(rows[m - 1, 10])):
            m -= 1
        L[i] = m
        for k in range(m):
            j, rr, ph = K.involution_coord(P, int(rows[k, 1]), rows[k, 2], rows[k, 3])
            sx, sy, svx, svy = K.coord_to_state(P, j, rr, ph)
            a, _, b, _ = ztub_kernel(P, corners, kinds, j, sx, sy, svx, svy)
            Z[i, k] = min(a, b)
        for n in range(1, min(m, N) + 1):
            if Z[i, n - 1] < thr or (n < m and Z[i, n] < thr):
                kappa_ladder(P, rows, n, B_grid, scales, KAP[i, n - 1])


def _set_workers(workers):
    if workers:
        nb.set_num_threads(max(1, min(int(workers), nb.config.NUMBA_NUM_THREADS)))


def _screen_batch(table, comp, r, phi, cfg, scales):
    n = len(r)
    N = cfg.horizon
    Z = np.full((n, N + 1), np.inf)
    L = np.zeros(n, np.int64)
    KAP = np.full((n, N, len(scales)), np.nan)
    pts, kinds = _corner_table(table)
    _screen(table.packed, pts, kinds, np.ascontiguousarray(comp, np.int64),
            np.ascontiguousarray(r, float), np.ascontiguousarray(phi, float), N,
            float(scales.max()), np.asarray(cfg.B_grid, float), scales, Z, L, KAP)
    return Z, L, KAP


# ------------------------------------------------------------ classification

@dataclass(frozen=True)
class PointClass:
    status: str
    n: int = 0
    z: float = math.nan
    kappa: float = math.nan
    threshold: float = math.nan


def _first_bad(Zi, Li, KAPi, N, scale, col):
    for n in range(1, min(Li, N) + 1):
        kap = KAPi[n - 1, col]
        if Zi[n - 1] < scale / kap:
            return n
    return 0


def classify_point(table: Table, y: CollisionCoord, cfg: DiagnosticsConfig,
                   delta: float | None = None) -> PointClass:
    """Good, bad at the first violating step, or undetermined (singular orbit)."""
    delta = cfg.deltas[0] if delta is None else float(delta)
    scales = np.array([cfg.c3 * delta])
    Z, L, KAP = _screen_batch(table, [y.component], [y.r], [y.phi], cfg, scales)
    n = _first_bad(Z[0], int(L[0]), KAP[0], cfg.horizon, scales[0], 0)
    if n:
        kap = float(KAP[0, n - 1, 0])
        return PointClass(BAD, n, float(Z[0, n - 1]), kap, scales[0] / kap)
    if L[0] < cfg.horizon:
        return PointClass(UNDETERMINED, int(L[0]) + 1)
    return PointClass(GOOD, cfg.horizon)


# ------------------------------------------------------------ witness search

def tilde_witness(table: Table, rows: np.ndarray, n: int, limit: float,
                  past_horizon: int = 200, corner_data=None):
    """Past sufficient y with Ty in S_0 on the flat fiber through Phi^eps1(T^n x).

    ``rows`` is the forward orbit of x (at least n + 1 events).  The fiber is
    the line through q(T^n x) + eps1 v perpendicular to v with eps1 half the
    next flight.  Its critical offsets come from the z_tub kernel; an offset
    is a witness when the next collision of the fiber changes there (so Ty is
    a corner or tangency), y lies inside the table, and y is past sufficient.
    Returns ``(offset, y)`` of the nearest witness within ``limit`` or None.
    """
    P = table.packed
    pts, kinds = _corner_table(table) if corner_data is None else corner_data
    row = rows[n - 1]
    j = int(row[1])
    q, v = row[4:6].copy(), row[6:8].copy()
    plus, _, minus, _ = ztub_kernel(P, pts, kinds, j, q[0], q[1], v[0], v[1])
    e = np.array([-v[1], v[0]])
    p0 = q + 0.5 * rows[n, 0] * v
    for d, sign in sorted(((plus, 1.0), (minus, -1.0))):
        if not d <= limit:
            break
        if not _fiber_changes(P, p0, v, sign * e, d):
            continue
        y = p0 + sign * d * e
        tb, jb, _, _ = K.next_event(P, y[0], y[1], -v[0], -v[1], -1)
        if jb < 0 or not math.isfinite(tb):
            continue
        yf = FlowPoint(y, v)
        if is_past_sufficient(table, yf, past_horizon).sufficient:
            return float(d), yf
    return None


def _fiber_changes(P, p0, v, e, d):
    h = max(d * 1e-7, 1e-13)
    lo, hi = p0 + (d - h) * e, p0 + (d + h) * e
    a = K.next_event(P, lo[0], lo[1], v[0], v[1], -1)
    b = K.next_event(P, hi[0], hi[1], v[0], v[1], -1)
    mid = p0 + d * e
    c = K.next_event(P, mid[0], mid[1], v[0], v[1], -1)
    return a[1] != b[1] or int(c[3]) in (K.TANGENTIAL, K.CORNER, K.KCORNER)


# ------------------------------------------------------------ sampling U0

def nu_mass_box(table: Table, U0: BaseNeighborhood):
    """Proposal box of U0: r-interval on the component and phi-interval."""
    P = table.packed
    j = U0.center.component
    lo_r = max(U0.center.r - U0.radius, P[j, OFF])
    hi_r = min(U0.center.r + U0.radius, P[j, OFF] + P[j, LEN])
    lo_p = max(U0.center.phi - U0.radius, -math.pi / 2)
    hi_p = min(U0.center.phi + U0.radius, math.pi / 2)
    return lo_r, hi_r, lo_p, hi_p


def sample_u0(table: Table, U0: BaseNeighborhood | None, n: int, rng: np.random.Generator):
    """``n`` nu-distributed points of U0 and the nu-mass of U0.

    With ``U0 = None`` the whole material collision space is used.  Otherwise
    points are drawn from nu restricted to the bounding box of the ball and
    rejected outside the ball; the mass is the box mass times the acceptance.
    """
    if U0 is None:
        comp, r, phi = sample_nu(table, n, rng)
        return comp, r, phi, 1.0
    lo_r, hi_r, lo_p, hi_p = nu_mass_box(table, U0)
    box = (hi_r - lo_r) * (math.sin(hi_p) - math.sin(lo_p)) / (2.0 * table.material_length)
    rs, ps = [], []
    drawn = kept = 0
    while kept < n:
        m = max(2 * (n - kept), 1024)
        r = lo_r + (hi_r - lo_r) * rng.random(m)
        phi = np.arcsin(math.sin(lo_p) + (math.sin(hi_p) - math.sin(lo_p)) * rng.random(m))
        ok = np.hypot(r - U0.center.r, phi - U0.center.phi) <= U0.radius
        drawn += m
        kept += int(ok.sum())
        rs.append(r[ok])
        ps.append(phi[ok])
    r = np.concatenate(rs)[:n]
    phi = np.concatenate(ps)[:n]
    comp = np.full(n, U0.center.component, np.int64)
    return comp, r, phi, box * kept / drawn


# ------------------------------------------------------------ tail estimate

@dataclass
class DeltaReport:
    delta: float
    F: float
    n_min: int
    count_tail: int
    nu_tail: float
    stderr: float
    good: int
    bad: int
    undetermined: int
    hist_n: dict
    count_tilde_tail: int
    nu_tilde_tail: float
    stderr_tilde: float
    hist_tilde_n: dict
    hist_tilde_nm: dict
    flags: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.nu_tail / self.delta

    @property
    def ratio_stderr(self) -> float:
        return self.stderr / self.delta


@dataclass
class BadSetReport:
    config: dict
    n_samples: int
    nu_U0: float
    per_delta: list

    def ratio_rows(self):
        return [(d.delta, d.nu_tail, d.stderr, d.ratio) for d in self.per_delta]

    def decreasing_within(self, sigmas: float = 2.0) -> bool:
        """Point estimates of the ratio strictly decrease along the grid (largest
        delta first) and no step rises by more than ``sigmas`` standard errors."""
        ds = sorted(self.per_delta, key=lambda d: -d.delta)
        for a, b in zip(ds, ds[1:]):
            if not b.ratio < a.ratio:
                return False
            if b.ratio - a.ratio > sigmas * math.hypot(a.ratio_stderr, b.ratio_stderr):
                return False
        return True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# delta: length scale; nu_tail_hat: estimated nu(U_omega^b) "
                     "(fraction of normalised nu); stderr: Monte-Carlo standard error; "
                     "ratio: nu_tail_hat / delta (1/length)\n")
            w = csv.writer(fh)
            w.writerow(["delta", "nu_tail_hat", "stderr", "ratio"])
            for row in self.ratio_rows():
                w.writerow([repr(float(x)) for x in row])

    def to_dict(self) -> dict:
        out = {"config": self.config, "n_samples": self.n_samples, "nu_U0": self.nu_U0,
               "per_delta": []}
        for d in self.per_delta:
            e = asdict(d)
            e["ratio"], e["ratio_stderr"] = d.ratio, d.ratio_stderr
            e["hist_n"] = {str(k): v for k, v in d.hist_n.items()}
            e["hist_tilde_n"] = {str(k): v for k, v in d.hist_tilde_n.items()}
            e["hist_tilde_nm"] = {f"{n},{m}": v for (n, m), v in d.hist_tilde_nm.items()}
            out["per_delta"].append(e)
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def feature_size(table: Table) -> float:
    """Smallest material component length or arc radius."""
    P = table.packed
    mat = P[:, MAT] == 1
    sizes = list(P[mat, LEN])
    sizes += list(P[mat & (P[:, KIND] == 1), RHO])
    return float(min(sizes))


def _estimate(count, n, mass):
    p = count / n
    return mass * p, mass * math.sqrt(p * (1.0 - p) / n)


def tail_estimate(table: Table, U0: BaseNeighborhood | None, cfg: DiagnosticsConfig,
                  workers: int | None = None, progress: Callable | None = None) -> BadSetReport:
    """Monte-Carlo estimate of nu(U_omega^b) and of its witness variant per delta.

    One nu-sample of U0 is drawn and shared by every delta, so the ratio curve
    is free of between-delta sampling noise.  Estimates whose relative standard
    error exceeds 25% are flagged and raise an :class:`InsufficientSamples`
    warning.
    """
    _set_workers(workers)
    rng = np.random.default_rng(cfg.seed)
    comp, r, phi, mass = sample_u0(table, U0, cfg.samples, rng)
    order = np.argsort(cfg.deltas)
    deltas = np.asarray(cfg.deltas, float)[order]
    scales = cfg.c3 * deltas
    J, N = len(deltas), cfg.horizon
    F = np.array([cfg.F(d) for d in deltas])
    n_min = np.floor(F).astype(int) + 1
    tail = np.zeros(J, np.int64)
    tilde_tail = np.zeros(J, np.int64)
    good = np.zeros(J, np.int64)
    bad = np.zeros(J, np.int64)
    undet = np.zeros(J, np.int64)
    hist = np.zeros((J, N + 1), np.int64)
    hist_tilde = np.zeros((J, N + 1), np.int64)
    hist_nm = [dict() for _ in range(J)]
    corner_data = _corner_table(table)
    n_idx = np.arange(1, N + 1)
    for start in range(0, cfg.samples, CHUNK):
        sl = slice(start, min(start + CHUNK, cfg.samples))
        Z, L, KAP = _screen_batch(table, comp[sl], r[sl], phi[sl], cfg, scales)
        valid = n_idx[None, :] <= np.minimum(L, N)[:, None]
        with np.errstate(invalid="ignore"):
            badm = (Z[:, :N, None] < scales[None, None, :] / KAP) & valid[:, :, None]
        any_bad = badm.any(axis=1)
        short = L < N
        for jj in range(J):
            bad[jj] += int(any_bad[:, jj].sum())
            undet[jj] += int((~any_bad[:, jj] & short).sum())
            good[jj] += int((~any_bad[:, jj] & ~short).sum())
            hist[jj, 1:] += badm[:, :, jj].sum(axis=0)
            tail[jj] += int(badm[:, n_min[jj] - 1:, jj].any(axis=1).sum())
        # witness variant: the link after step n must itself be short
        nxt = n_idx[None, :] < L[:, None]
        with np.errstate(invalid="ignore"):
            cand = (Z[:, 1:N + 1, None] < scales[None, None, :] / KAP) & nxt[:, :, None]
        rows_cache = {}
        hits = np.zeros((Z.shape[0], N, J), bool)
        for i, n in zip(*np.nonzero(cand.any(axis=2))):
            i, n = int(i), int(n) + 1
            if i not in rows_cache:
                k = start + i
                rows_cache[i] = orbit(table, CollisionCoord(int(comp[k]), float(r[k]),
                                                            float(phi[k])), N + 1)
            limit = float(np.nanmax(scales / KAP[i, n - 1]))
            w = tilde_witness(table, rows_cache[i], n, limit, cfg.past_horizon, corner_data)
            if w is None:
                continue
            for jj in range(J):
                if w[0] <= scales[jj] / KAP[i, n - 1, jj]:
                    hits[i, n - 1, jj] = True
        for jj in range(J):
            hist_tilde[jj, 1:] += hits[:, :, jj].sum(axis=0)
            tilde_tail[jj] += int(hits[:, n_min[jj] - 1:, jj].any(axis=1).sum())
            for i, n0 in zip(*np.nonzero(hits[:, :, jj])):
                m = int(math.floor(math.log(KAP[i, n0, jj]) / math.log(cfg.base)))
                key = (int(n0) + 1, m)
                hist_nm[jj][key] = hist_nm[jj].get(key, 0) + 1
        if progress is not None:
            progress(sl.stop, cfg.samples)
    feat = feature_size(table)
    reports = []
    for jj in range(J):
        nu, se = _estimate(int(tail[jj]), cfg.samples, mass)
        nut, set_ = _estimate(int(tilde_tail[jj]), cfg.samples, mass)
        flags = []
        if nu == 0 or se / nu > MAX_REL_STDERR:
            flags.append("insufficient-samples")
            warnings.warn(f"delta={deltas[jj]:g}: relative standard error above 25% "
                          f"({int(tail[jj])} tail samples)", InsufficientSamples, stacklevel=2)
        if deltas[jj] > feat:
            flags.append("boundary-effect")
        reports.append(DeltaReport(
            float(deltas[jj]), float(F[jj]), int(n_min[jj]), int(tail[jj]), nu, se,
            int(good[jj]), int(bad[jj]), int(undet[jj]),
            {n: int(hist[jj, n]) for n in range(1, N + 1) if hist[jj, n]},
            int(tilde_tail[jj]), nut, set_,
            {n: int(hist_tilde[jj, n]) for n in range(1, N + 1) if hist_tilde[jj, n]},
            dict(sorted(hist_nm[jj].items())), flags))
    reports.sort(key=lambda d: -d.delta)
    return BadSetReport(cfg.to_dict(), cfg.samples, mass, reports)


def calibrate_c3(table: Table, c3_values, cfg: DiagnosticsConfig, U0=None,
                 workers: int | None = None) -> list:
    """Tail ratio curves for several c3; rows ``(c3, delta, nu_tail, stderr, ratio,
    decreasing)``."""
    out = []
    for c3 in c3_values:
        rep = tail_estimate(table, U0, _replace_cfg(cfg, c3=float(c3)), workers)
        dec = rep.decreasing_within()
        for d in rep.per_delta:
            out.append((float(c3), d.delta, d.nu_tail, d.stderr, d.ratio, dec))
    return out


def _replace_cfg(cfg, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


# ------------------------------------------------------------ Lyapunov

@jit
def _lyapunov_run(P, qx, qy, vx, vy, N, stride, trace):
    """log D of the flat front over N material collisions; trace every ``stride``."""
    B = 0.0
    logd = 0.0
    nmat = 0
    budget = 1000 * N + 1_000_000
    while nmat < N and budget > 0:
        budget -= 1
        t, j, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
        if _is_singular(cls):
            return logd, nmat
        k, rr, ph, px, py, wx, wy, Kc, cp = K.resolve(P, t, j, u, qx, qy, vx, vy)
        f = 1.0 + t * B
        logd += math.log(f)
        B = B / f
        if P[j, MAT] == 1.0:
            nmat += 1
            B += 2.0 * Kc / cp
            if nmat % stride == 0:
                trace[nmat // stride - 1] = logd / nmat
        qx, qy, vx, vy = px, py, wx, wy
    return logd, nmat


@pjit
def _lyapunov_many(P, comp, r, phi, N, stride, traces, logd, done):
    for i in nb.prange(r.shape[0]):
        qx, qy, vx, vy = K.coord_to_state(P, comp[i], r[i], phi[i])
        logd[i], done[i] = _lyapunov_run(P, qx, qy, vx, vy, N, stride, traces[i])


@dataclass
class LyapunovResult:
    exponent: float
    n_collisions: int
    checkpoints: np.ndarray
    trace: np.ndarray
    restarts: list
    start: CollisionCoord


def _perturb(table, m: CollisionCoord, rng):
    P = table.packed
    j = m.component
    lo, hi = P[j, OFF], P[j, OFF] + P[j, LEN]
    r = float(np.clip(m.r + 1e-9 * rng.standard_normal(), lo, hi))
    phi = float(np.clip(m.phi + 1e-9 * rng.standard_normal(), -1.5, 1.5))
    return CollisionCoord(j, r, phi, m.material)


def lyapunov_batch(table: Table, starts, N: int, seed: int = 0, n_trace: int = 100,
                   workers: int | None = None, max_restarts: int = 20) -> list:
    """:func:`lyapunov_estimate` for many starts, run in parallel."""
    _set_workers(workers)
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    stride = max(1, N // n_trace)
    m = N // stride
    starts = list(starts)
    cur = list(starts)
    restarts = [[] for _ in starts]
    results = [None] * len(starts)
    rng = np.random.default_rng(seed)
    todo = list(range(len(starts)))
    for _ in range(max_restarts + 1):
        if not todo:
            break
        comp = np.array([cur[i].component for i in todo], np.int64)
        r = np.array([cur[i].r for i in todo])
        phi = np.array([cur[i].phi for i in todo])
        traces = np.full((len(todo), m), np.nan)
        logd = np.zeros(len(todo))
        done = np.zeros(len(todo), np.int64)
        _lyapunov_many(table.packed, comp, r, phi, N, stride, traces, logd, done)
        left = []
        for a, i in enumerate(todo):
            if done[a] < N:
                restarts[i].append({"at_collision": int(done[a]), "from": asdict(cur[i])})
                cur[i] = _perturb(table, cur[i], rng)
                left.append(i)
                continue
            results[i] = LyapunovResult(float(logd[a] / N), N, stride * np.arange(1, m + 1),
                                        traces[a], restarts[i], starts[i])
        todo = left
    if todo:
        from .dynamics import SingularEncounter
        raise SingularEncounter(f"{len(todo)} starts kept hitting singularities")
    return results


def lyapunov_estimate(table: Table, x: CollisionCoord, N: int, seed: int = 0,
                      n_trace: int = 100, period: int | None = None) -> LyapunovResult:
    """(1/N) log D^N of the flat front along N material collisions from ``x``.

    A singular encounter restarts the run from a 1e-9 perturbation of the
    current start; restarts are recorded in the result.  With ``period`` set,
    x must start a closed orbit of that many material collisions; the front is
    then carried around the recorded loop, which round-off cannot leave.
    """
    if period is None:
        return lyapunov_batch(table, [x], N, seed, n_trace)[0]
    legs = closed_orbit_legs(table, x, period)
    stride = max(1, int(N) // n_trace)
    trace = np.full(int(N) // stride, np.nan)
    logd = _loop_log_D(legs, int(N), stride, trace)
    return LyapunovResult(float(logd / N), int(N), stride * np.arange(1, len(trace) + 1),
                          trace, [], x)


class OpenOrbit(ValueError):
    """The orbit does not close after the stated number of collisions."""


def closed_orbit_legs(table: Table, x: CollisionCoord, period: int, tol: float = 1e-9):
    """Rows ``(t, K, cos_phi, material)`` of one loop of a periodic orbit."""
    rows = orbit(table, x, 1000 * period)
    mat = np.flatnonzero(table.packed[rows[:, 1].astype(int), MAT] == 1)
    if len(mat) < period:
        raise OpenOrbit("orbit too short")
    loop = rows[:mat[period - 1] + 1]
    end = loop[-1]
    if (int(end[1]) != x.component or abs(end[2] - x.r) > tol
            or abs(math.remainder(end[3] - x.phi, 2 * math.pi)) > tol):
        raise OpenOrbit(f"orbit does not close after {period} collisions")
    is_mat = table.packed[loop[:, 1].astype(int), MAT] == 1
    return np.column_stack([loop[:, 0], loop[:, 8], loop[:, 9], is_mat.astype(float)])


@jit
def _loop_log_D(legs, N, stride, trace):
    B = 0.0
    logd = 0.0
    nmat = 0
    k = 0
    while nmat < N:
        t, Kc, cp, mat = legs[k, 0], legs[k, 1], legs[k, 2], legs[k, 3]
        f = 1.0 + t * B
        logd += math.log(f)
        B = B / f
        if mat == 1.0:
            nmat += 1
            B += 2.0 * Kc / cp
            if nmat % stride == 0 and nmat // stride <= trace.shape[0]:
                trace[nmat // stride - 1] = logd / nmat
        k = (k + 1) % legs.shape[0]
    return logd


def lyapunov_dispersion(results) -> dict:
    lam = np.array([res.exponent for res in results])
    mean = float(lam.mean())
    sd = float(lam.std(ddof=1)) if len(lam) > 1 else 0.0
    return {"mean": mean, "std": sd, "relative_dispersion": sd / abs(mean) if mean else math.inf,
            "n_starts": len(lam), "restarts": int(sum(len(res.restarts) for res in results))}


# ------------------------------------------------------------ Birkhoff probe

@pjit
def _birkhoff_many(P, comp, r, phi, N, side_mask, sums, done):
    for i in nb.prange(r.shape[0]):
        qx, qy, vx, vy = K.coord_to_state(P, comp[i], r[i], phi[i])
        nmat = 0
        s_cos = 0.0
        s_side = 0.0
        budget = 1000 * N + 1_000_000
        while nmat < N and budget > 0:
            budget -= 1
            t, j, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
            if _is_singular(cls):
                break
            k, rr, ph, px, py, wx, wy, Kc, cp = K.resolve(P, t, j, u, qx, qy, vx, vy)
            if P[j, MAT] == 1.0:
                nmat += 1
                s_cos += math.cos(ph)
                if side_mask[j]:
                    s_side += 1.0
            qx, qy, vx, vy = px, py, wx, wy
        done[i] = nmat
        sums[i, 0] = nmat
        sums[i, 1] = s_cos
        sums[i, 2] = s_side


def _parse_functions(table, names):
    """Names: ``one``, ``cos_phi``, ``side:i,j,...`` (indicator of those components)."""
    mask = np.zeros(table.packed.shape[0], np.bool_)
    cols = []
    for name in names:
        if name == "one":
            cols.append(0)
        elif name == "cos_phi":
            cols.append(1)
        elif name.startswith("side:"):
            ids = [int(s) for s in name[5:].split(",") if s]
            if any(not 0 <= i < len(mask) or table.packed[i, MAT] != 1 for i in ids):
                raise ValueError(f"{name}: not a material component")
            if mask.any() and not np.array_equal(np.flatnonzero(mask), sorted(ids)):
                raise ValueError("only one side indicator per probe")
            mask[ids] = True
            cols.append(2)
        else:
            raise ValueError(f"unknown test function {name!r}")
    return mask, cols


def birkhoff_probe(table: Table, x0: CollisionCoord | None, U0: BaseNeighborhood | None,
                   test_functions, N: int, n_starts: int, seed: int = 0,
                   sufficiency_horizon: int = 200, workers: int | None = None) -> dict:
    """Birkhoff averages over N material collisions from nu-random starts in U0.

    Small cross-start dispersion is consistent with, never a proof of, local
    ergodicity.  The sufficiency of ``x0`` is recorded where decidable.
    """
    _set_workers(workers)
    names = list(test_functions)
    mask, cols = _parse_functions(table, names)
    rng = np.random.default_rng(seed)
    comp, r, phi, _ = sample_u0(table, U0, n_starts, rng)
    sums = np.zeros((n_starts, 3))
    done = np.zeros(n_starts, np.int64)
    for _ in range(20):
        _birkhoff_many(table.packed, comp, r, phi, int(N), mask, sums, done)
        bad = done < N
        if not bad.any():
            break
        r = r.copy()
        r[bad] += 1e-9 * rng.standard_normal(int(bad.sum()))
    avgs = sums[:, cols] / np.maximum(sums[:, :1], 1)
    out = {"N": int(N), "n_starts": int(n_starts), "seed": seed, "functions": {}}
    for k, name in enumerate(names):
        a = avgs[:, k]
        out["functions"][name] = {"mean": float(a.mean()),
                                  "dispersion": float(a.std(ddof=1)) if n_starts > 1 else 0.0,
                                  "averages": a.tolist()}
    if x0 is not None:
        out["x0_future"] = is_future_sufficient(table, x0, sufficiency_horizon).status
        out["x0_past"] = is_past_sufficient(table, x0, sufficiency_horizon).status
    return out


# ------------------------------------------------------------ invariance

@pjit
def _return_map(P, comp, r, phi, oc, orr, oph, ok):
    """First return to the material boundary."""
    for i in nb.prange(r.shape[0]):
        qx, qy, vx, vy = K.coord_to_state(P, comp[i], r[i], phi[i])
        ok[i] = False
        for _ in range(1000):
            t, j, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
            if _is_singular(cls):
                break
            k, rr, ph, px, py, wx, wy, Kc, cp = K.resolve(P, t, j, u, qx, qy, vx, vy)
            if P[k, MAT] == 1.0:
                oc[i], orr[i], oph[i] = k, rr, ph
                ok[i] = True
                break
            qx, qy, vx, vy = px, py, wx, wy


def material_return(table: Table, comp, r, phi):
    """Vectorised return map to the material boundary; ``ok`` marks regular landings."""
    n = len(r)
    oc, orr, oph = np.empty(n, np.int64), np.empty(n), np.empty(n)
    ok = np.empty(n, np.bool_)
    _return_map(table.packed, np.ascontiguousarray(comp, np.int64),
                np.ascontiguousarray(r, float), np.ascontiguousarray(phi, float), oc, orr, oph, ok)
    return oc, orr, oph, ok


def invariance_check(table: Table, n_samples: int, seed: int, sampler: str = "nu",
                     mapping: str = "T", bins: int = 50) -> dict:
    """Two-sample KS (r and phi marginals) and a chi-square homogeneity test on a
    ``bins`` x ``bins`` grid between a sample and its image.

    ``sampler="uniform"`` draws phi uniformly (a biased control);
    ``mapping="identity"`` compares the sample with itself.
    """
    rng = np.random.default_rng(seed)
    comp, r, phi = sample_nu(table, n_samples, rng)
    if sampler == "uniform":
        phi = rng.uniform(-math.pi / 2, math.pi / 2, n_samples)
    elif sampler != "nu":
        raise ValueError(f"unknown sampler {sampler!r}")
    if mapping == "T":
        _, r2, phi2, ok = material_return(table, comp, r, phi)
    elif mapping == "identity":
        r2, phi2, ok = r.copy(), phi.copy(), np.ones(n_samples, bool)
    else:
        raise ValueError(f"unknown mapping {mapping!r}")
    r2, phi2 = r2[ok], phi2[ok]
    ks_r = stats.ks_2samp(r, r2)
    ks_phi = stats.ks_2samp(phi, phi2)
    L = table.material_length
    edges = (np.linspace(0.0, L, bins + 1), np.linspace(-math.pi / 2, math.pi / 2, bins + 1))
    h1 = np.histogram2d(r, phi, bins=edges)[0].ravel()
    h2 = np.histogram2d(r2, phi2, bins=edges)[0].ravel()
    keep = (h1 + h2) > 0
    chi = stats.chi2_contingency(np.vstack([h1[keep], h2[keep]]), correction=False)
    return {"n_samples": int(n_samples), "seed": seed, "sampler": sampler, "mapping": mapping,
            "singular_dropped": int((~ok).sum()),
            "ks_r": {"statistic": float(ks_r.statistic), "pvalue": float(ks_r.pvalue)},
            "ks_phi": {"statistic": float(ks_phi.statistic), "pvalue": float(ks_phi.pvalue)},
            "chi2": {"statistic": float(chi.statistic), "pvalue": float(chi.pvalue),
                     "dof": int(chi.dof)}}
