"""Geometric constructions near bad points.

* :func:`lemma21_embed` places two nearby phase points, after short time
  shifts, on one circle-carried divergent front.
* :func:`build_sync_frame` builds the flow-synchronised frame next to a point
  whose stable-manifold construction breaks at step n: the front
  Sigma-hat between ``x_eps1 = -Phi^eps1(T^n x)`` and a singular endpoint
  ``x1``, the line ``H`` of singular rays parallel to ``v_eps1``, and the point
  ``x3 = (q3, v_eps1)``.
* :func:`build_strip` sweeps Sigma-hat forward to its (n+1)-st collision and
  :func:`strip_contains_orbit` checks that the orbit of ``x3`` never leaves
  the swept strip.
* :func:`foliation_chart` attaches constant-velocity transversal fibers to a
  traced S_1 curve.

The synchronised front is an arc of the circle of radius ``R = 2 tau - eps1``
centred at ``C = q_n + 2 tau v_n``: its rays are the lines through ``C``, so
a ray is singular exactly when the line through ``C`` touches an arc or passes
a corner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K
from .dynamics import CollisionCoord, FlowPoint, SingularEncounter, involution, orbit
from .geometry import AX, AY, FULL, KIND, LEN, MAT, OFF, RHO, Table, pocket_square, sinai
from .singularity import SOURCE_NAMES, TANGENCY, _foot, _shot, shot_families

CASE_FACTOR = 5000.0
GRAZE_TOL = 1e-7
POST, FALLBACK = "post-singularity", "pre-tangency"
_SINGULAR = (K.TANGENTIAL, K.CORNER, K.KCORNER)


class PreconditionViolated(ValueError):
    pass


class NoSingularEndpoint(RuntimeError):
    """The point has no nearby singular front endpoint (it is not bad at step n)."""


class SmoothnessBroken(SingularEncounter):
    """A front sample meets a singularity before its (n+1)-st collision."""


class EdgeCrossing(RuntimeError):
    def __init__(self, msg, time):
        super().__init__(msg)
        self.time = time


class FiberCollision(RuntimeError):
    pass


# ------------------------------------------------------------ two-point embedding

@dataclass(frozen=True)
class EmbeddingResult:
    tau1: float
    tau2: float
    center: tuple | None
    radius: float
    case: str
    points: tuple
    velocities: tuple

    def residuals(self) -> tuple[float, float]:
        """(circle residual relative to the radius, normal-alignment residual)."""
        (p1, p2), (v1, v2) = self.points, self.velocities
        if self.center is None:
            gap = abs((p2[0] - p1[0]) * v1[0] + (p2[1] - p1[1]) * v1[1])
            return gap, math.hypot(v1[0] - v2[0], v1[1] - v2[1])
        cx, cy = self.center
        circ = align = 0.0
        for (px, py), (vx, vy) in zip(self.points, self.velocities):
            d = math.hypot(px - cx, py - cy)
            circ = max(circ, abs(d - self.radius) / self.radius)
            align = max(align, math.hypot((px - cx) / d - vx, (py - cy) / d - vy))
        return circ, align


def _unit(v):
    x, y = float(v[0]), float(v[1])
    n = math.hypot(x, y)
    return x / n, y / n


def lemma21_embed(q1, v1, q2, v2, eps0: float) -> EmbeddingResult:
    """Time shifts putting (q1, v1) and (q2, v2) on one divergent circle front.

    With O the intersection of the two lines and ``q_i = O + t_i v_i``: if
    ``t1 >= 5000 eps0`` the circle ``|x - O| = t1`` is used, otherwise the
    circle of radius ``5000 eps0``.  Equal velocities give a flat front.

    Raises
    ------
    PreconditionViolated
        Points or velocities not ``eps0``-close, or ``<q1-q2, v1-v2> < 0``.
    """
    q1x, q1y = float(q1[0]), float(q1[1])
    q2x, q2y = float(q2[0]), float(q2[1])
    a1, b1 = _unit(v1)
    a2, b2 = _unit(v2)
    dx, dy = q1x - q2x, q1y - q2y
    wx, wy = a1 - a2, b1 - b2
    if math.hypot(dx, dy) >= eps0 or math.hypot(wx, wy) >= eps0:
        raise PreconditionViolated("points or velocities are not eps0-close")
    if dx * wx + dy * wy < 0.0:
        raise PreconditionViolated("<q1 - q2, v1 - v2> < 0")
    det = a1 * b2 - b1 * a2
    if det == 0.0:
        tau2 = dx * a1 + dy * b1
        return EmbeddingResult(0.0, tau2, None, math.inf, "degenerate-flat",
                               ((q1x, q1y), (q2x + tau2 * a2, q2y + tau2 * b2)),
                               ((a1, b1), (a2, b2)))
    t1 = (dx * b2 - dy * a2) / det
    # t1 - t2 without the small determinant
    gap = (dx * (a1 + a2) + dy * (b1 + b2)) / (1.0 + a1 * a2 + b1 * b2)
    t2 = t1 - gap
    if t1 < 0.0 < t2:
        r = lemma21_embed(q2, v2, q1, v1, eps0)
        return replace(r, tau1=r.tau2, tau2=r.tau1, points=r.points[::-1],
                       velocities=r.velocities[::-1])
    ox, oy = q1x - t1 * a1, q1y - t1 * b1
    big = CASE_FACTOR * eps0
    if t1 >= big:
        tau1, tau2, rho, case = 0.0, gap, t1, "case1"
    else:
        tau1, tau2, rho, case = big - t1, big - t1 + gap, big, "case2"
    p1 = (q1x + tau1 * a1, q1y + tau1 * b1)
    p2 = (q2x + tau2 * a2, q2y + tau2 * b2)
    return EmbeddingResult(tau1, tau2, (ox, oy), rho, case, (p1, p2), ((a1, b1), (a2, b2)))


def random_admissible_pair(rng: np.random.Generator, eps0: float):
    """A random pair satisfying the embedding hypotheses.

    Distances and angles are log-uniform half of the time so that both
    circle cases occur often.
    """
    amax = 2.0 * math.asin(0.5 * eps0) * (1.0 - 1e-9)
    if rng.random() < 0.5:
        ang = rng.uniform(-amax, amax)
        dist = rng.uniform(0.0, eps0)
    else:
        ang = math.copysign(amax * 10.0 ** rng.uniform(-9, 0), rng.random() - 0.5)
        dist = eps0 * 10.0 ** rng.uniform(-6, 0) * (1.0 - 1e-9)
    base = rng.uniform(0.0, 2.0 * math.pi)
    v1 = np.array([math.cos(base), math.sin(base)])
    v2 = np.array([math.cos(base + ang), math.sin(base + ang)])
    th = rng.uniform(0.0, 2.0 * math.pi)
    d = dist * np.array([math.cos(th), math.sin(th)])
    if np.dot(d, v1 - v2) < 0.0:
        d = -d
    q2 = rng.random(2)
    return q2 + d, v1, q2, v2


def lemma21_fuzz(n: int, eps0: float, seed: int) -> dict:
    """Embed ``n`` random admissible pairs and tally bound and residual checks."""
    rng = np.random.default_rng(seed)
    cases = {"case1": 0, "case2": 0, "degenerate-flat": 0}
    bound_viol = circ_viol = align_viol = 0
    max_circ = max_align = max_tau = 0.0
    for _ in range(n):
        r = lemma21_embed(*random_admissible_pair(rng, eps0), eps0)
        cases[r.case] += 1
        c, a = r.residuals()
        t = max(abs(r.tau1), abs(r.tau2))
        bound_viol += t >= 10000.0 * eps0
        circ_viol += c >= 1e-9
        align_viol += a >= 1e-9
        max_circ, max_align, max_tau = max(max_circ, c), max(max_align, a), max(max_tau, t)
    return {"n": n, "eps0": eps0, "seed": seed, "cases": cases,
            "tau_bound_violations": int(bound_viol), "circle_violations": int(circ_viol),
            "alignment_violations": int(align_viol), "max_circle_residual": max_circ,
            "max_alignment_residual": max_align, "max_abs_tau": max_tau}


# ------------------------------------------------------------ base neighbourhood

@dataclass(frozen=True)
class BaseNeighborhood:
    """Ball of radius ``radius`` in (r, phi) around ``center`` on one component."""
    center: CollisionCoord
    radius: float

    def contains(self, m: CollisionCoord) -> bool:
        return (m.component == self.center.component
                and math.hypot(m.r - self.center.r, m.phi - self.center.phi) <= self.radius)


# ------------------------------------------------------------ flight tracing

@dataclass
class Path:
    legs: np.ndarray          # (m, 4): start xy, end xy (end before any wall shift)
    times: np.ndarray         # (m, 2): flow time at leg start and end
    events: list              # (hit component, local u, recorded component, r, phi)
    grazes: list = field(default_factory=list)

    @property
    def itinerary(self):
        return tuple(e[0] for e in self.events)

    @property
    def landing(self) -> CollisionCoord:
        _, _, k, r, ph = self.events[-1]
        return CollisionCoord(k, r, ph)


def _wrap(table, qx, qy):
    if table.ambient != "torus":
        return qx, qy
    w, h = table.rectangle
    return qx % w, qy % h


def _trace(table: Table, q, v, n_events: int, graze_tol: float = GRAZE_TOL) -> Path:
    """Follow ``n_events`` boundary events from (q, v).

    Arc touches with ``|cos phi| < graze_tol`` are passed straight through and
    recorded in ``grazes``; corners and exact tangencies raise
    :class:`SmoothnessBroken`.
    """
    P = table.packed
    qx, qy = _wrap(table, float(q[0]), float(q[1]))
    vx, vy = float(v[0]), float(v[1])
    sx, sy, t0, clock = qx, qy, 0.0, 0.0
    legs, times, events, grazes = [], [], [], []
    skip = -1
    while len(events) < n_events:
        t, j, u, cls = K.next_event(P, qx, qy, vx, vy, skip)
        if j < 0:
            raise SmoothnessBroken("ray escapes the table", time=clock)
        px, py = qx + t * vx, qy + t * vy
        if P[j, MAT] == 1.0 and P[j, KIND] == 1.0 and cls in (K.REGULAR, K.TANGENTIAL):
            nx, ny = K.normal_xy(P, j, px, py)
            if abs(vx * nx + vy * ny) < graze_tol:
                grazes.append((clock + t, int(j), px, py))
                qx, qy, clock, skip = px, py, clock + t, j
                continue
        if cls in _SINGULAR:
            raise SmoothnessBroken(f"singular event at step {len(events) + 1}", time=clock + t)
        k, r, ph, nxq, nyq, wx, wy, _, _ = K.resolve(P, t, j, u, qx, qy, vx, vy)
        clock += t
        legs.append((sx, sy, px, py))
        times.append((t0, clock))
        events.append((int(j), float(u), int(k), float(r), float(ph)))
        qx, qy, vx, vy, skip = nxq, nyq, wx, wy, -1
        sx, sy, t0 = qx, qy, clock
    return Path(np.array(legs), np.array(times), events, grazes)


# ------------------------------------------------------------ synchronised frame

@dataclass(frozen=True)
class SyncFrame:
    x: CollisionCoord | None
    n: int
    eps1: float
    tau: float
    center: np.ndarray
    radius: float
    axis: np.ndarray            # v_eps1
    lateral: np.ndarray         # unit normal to the axis, pointing to the singular side
    theta: float                # angular extent of the front about the centre
    x_eps1: FlowPoint
    x1: FlowPoint
    singular_point: np.ndarray  # where the line of x1 meets S_0
    singular_kind: str
    q_star: np.ndarray          # point of H on the boundary (tangency or corner)
    graze_component: int
    q3: np.ndarray
    x3: FlowPoint
    q3_tilde: np.ndarray | None
    v3: np.ndarray | None
    eta: float
    mode: str

    @property
    def H(self):
        """(point, direction) of the line of singular rays parallel to v_eps1."""
        return self.q_star, self.axis

    @property
    def reach(self) -> float:
        """Front length at the collision point q_n, i.e. dist(-T^n x, x')."""
        return (self.radius + self.eps1) * self.theta

    def ray(self, th: float):
        u = math.cos(th) * self.axis + math.sin(th) * self.lateral
        return self.center + self.radius * u, u

    def polar(self, q):
        d = np.asarray(q, float) - self.center
        return math.atan2(d @ self.lateral, d @ self.axis), math.hypot(*d)


def _event_sig(P, px, py, ux, uy):
    t, j, u, cls = K.next_event(P, px, py, ux, uy, -1)
    return j, cls in _SINGULAR


def _pencil_sig(P, C, R, a, e, th):
    u = math.cos(th) * a + math.sin(th) * e
    p = C + R * u
    return _event_sig(P, p[0], p[1], -u[0], -u[1]) + _event_sig(P, p[0], p[1], u[0], u[1])


def _first_singular_line(P, C, R, a, e, th_max=math.pi / 4):
    """Smallest angle at which the pencil line stops being equivalent to the axis.

    Returns ``(lo, hi, which)`` with ``lo`` the last regular angle and
    ``which`` 'back' (towards C) or 'fore'; None if nothing up to ``th_max``.
    """
    s0 = _pencil_sig(P, C, R, a, e, 0.0)
    prev, th = 0.0, 1e-13
    while th <= th_max:
        if _pencil_sig(P, C, R, a, e, th) != s0:
            break
        prev, th = th, 2.0 * th
    else:
        return None
    grid = np.linspace(prev, th, 17)
    for lo, hi in zip(grid[:-1], grid[1:]):
        if _pencil_sig(P, C, R, a, e, hi) != s0:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _pencil_sig(P, C, R, a, e, mid) == s0:
            lo = mid
        else:
            hi = mid
    s_hi = _pencil_sig(P, C, R, a, e, hi)
    return lo, hi, "back" if s_hi[:2] != s0[:2] else "fore"


def _feature(P, C, R, a, e, lo, hi, which):
    """Singular point on the switching line: ('tangency', X, arc) or ('corner', X, -1)."""
    sg = -1.0 if which == "back" else 1.0
    hits = []
    for th in (lo, hi):
        u = math.cos(th) * a + math.sin(th) * e
        p = C + R * u
        d = sg * u
        t, j, uu, cls = K.next_event(P, p[0], p[1], d[0], d[1], -1)
        if j >= 0:
            hx, hy = p + t * d
            hits.append((j, uu, hx, hy, d))
    for j, uu, hx, hy, d in hits:
        if P[j, KIND] == 1.0 and P[j, MAT] == 1.0:
            nx, ny = K.normal_xy(P, j, hx, hy)
            if abs(d[0] * nx + d[1] * ny) < 1e-4:
                c = np.array([P[j, AX], P[j, AY]])
                u = math.cos(hi) * a + math.sin(hi) * e
                return "tangency", C + ((c - C) @ u) * u, j
    best = None
    for j, uu, hx, hy, d in hits:
        for end in (0.0, P[j, LEN]):
            X = np.array(K.point_xy(P, j, end))
            dist = math.hypot(X[0] - hx, X[1] - hy)
            if best is None or dist < best[0]:
                best = (dist, X)
    return "corner", best[1], -1


def _parallel_tangency(P, j, q_eps, a, e, fallback):
    """Point where the line parallel to ``a`` on the axis side touches arc j."""
    c = np.array([P[j, AX], P[j, AY]])
    side = 1.0 if (c - q_eps) @ e >= 0 else -1.0
    q = c - side * P[j, RHO] * e
    u = K.arc_param(P, j, q[0], q[1])
    if P[j, FULL] == 1.0 or -K.CORNER_U_TOL <= u <= P[j, LEN] + K.CORNER_U_TOL:
        return q
    return fallback


def assemble_frame(center, radius, axis, lateral, theta, q_star, singular_point,
                   singular_kind="corner", graze_component=-1, x=None, n=0, eps1=0.0,
                   tau=0.0, mode=None) -> SyncFrame:
    """Frame of a circle front (centre, radius) seen from a singular point.

    Works without a table; ``mode`` defaults to the geometric criterion
    (singular point between the front and the centre means post-singularity).
    """
    C = np.asarray(center, float)
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    e = np.asarray(lateral, float) / np.linalg.norm(lateral)
    R = float(radius)
    u1 = math.cos(theta) * a + math.sin(theta) * e
    q1 = C + R * u1
    q_eps = C + R * a
    X = np.asarray(singular_point, float)
    if mode is None:
        mode = POST if np.linalg.norm(X - C) < R else FALLBACK
    qs = np.asarray(q_star, float)
    h = float((qs - q_eps) @ e)
    q3 = q_eps + h * e
    if abs(h) < R:
        s = h / R
        c = math.sqrt(1.0 - s * s)
        w = c * a + s * e
        q3t, v3, eta = C + R * w, w, h * h / (R * (1.0 + c))
    else:
        q3t, v3, eta = None, None, math.nan
    return SyncFrame(x, n, eps1, tau, C, R, a, e, float(theta), FlowPoint(q_eps, a),
                     FlowPoint(q1, u1), X, singular_kind, qs, graze_component, q3,
                     FlowPoint(q3, a), q3t, v3, eta, mode)


def build_sync_frame(table: Table, x: CollisionCoord, n: int, eps1_search=None, *,
                     max_reach: float = 1e-2, eps1_floor: float = 1e-9) -> SyncFrame:
    """Flow-synchronised frame at step ``n`` of the orbit of ``x``.

    ``eps1`` runs through ``eps1_search`` (default tau/2, tau/4, ... down to
    ``eps1_floor * tau``) until the singular endpoint ``x1`` is post-singular;
    if none is, the smallest ``eps1`` is used in pre-tangency mode.

    Raises
    ------
    NoSingularEndpoint
        The orbit is singular before step n+1, or no singular line through the
        pencil lies within ``max_reach`` of -T^n x.
    """
    P = table.packed
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = orbit(table, x, n + 1)
    if len(rows) < n + 1 or any(int(c) in _SINGULAR for c in rows[:, 10]):
        raise NoSingularEndpoint("orbit meets S_0 before step n+1")
    qn, vn, tau = rows[n - 1, 4:6].copy(), rows[n - 1, 6:8].copy(), float(rows[n, 0])
    C = qn + 2.0 * tau * vn
    a = -vn
    perp = np.array([-a[1], a[0]])
    if eps1_search is None:
        eps1_search, k = [], 1
        while 0.5 ** k >= eps1_floor:
            eps1_search.append(tau * 0.5 ** k)
            k += 1
    found = None
    for eps1 in eps1_search:
        if not 0.0 < eps1 < tau:
            raise ValueError("eps1 must lie in (0, tau)")
        R = 2.0 * tau - eps1
        best = None
        for side in (1.0, -1.0):
            line = _first_singular_line(P, C, R, a, side * perp)
            if line is not None and (best is None or line[0] < best[1][0]):
                best = (side, line)
        if best is None or 2.0 * tau * best[1][0] > max_reach:
            raise NoSingularEndpoint("no singular front endpoint within reach")
        found = (eps1, R, best)
        if best[1][2] == "back":
            break
    eps1, R, (side, (lo, hi, which)) = found
    e = side * perp
    kind, X, arc = _feature(P, C, R, a, e, lo, hi, which)
    q_eps = C + R * a
    q_star = _parallel_tangency(P, arc, q_eps, a, e, X) if kind == "tangency" else X
    return assemble_frame(C, R, a, e, lo, q_star, X, kind, arc, x, n, eps1, tau,
                          POST if which == "back" else FALLBACK)


def lmf_check(frame: SyncFrame, tol: float = -1e-12) -> dict:
    """Scalar products of the two-point condition for (x3, x1) and (x3, x_eps1).

    In pre-tangency mode the lines of x1 and x3 cross where x3 enters the
    strip; the products are evaluated just past that crossing, and the value
    at the frame time is reported as ``first_raw``.
    """
    a = frame.axis
    q1, v1 = frame.x1.q, frame.x1.v
    q3 = frame.q3
    raw = float((q1 - q3) @ (v1 - a))
    first, shift = raw, 0.0
    if frame.mode == FALLBACK:
        M = np.column_stack([v1, -a])
        if abs(np.linalg.det(M)) > 0:
            s1, s3 = np.linalg.solve(M, q3 - q1)
            mu = 1e-4 * max(frame.radius, 1e-12)
            shift = max(s3, 0.0) + mu
            first = float((q1 + (s1 - s3 + shift) * v1 - q3 - shift * a) @ (v1 - a))
    # v(x3) is v_eps1 by construction, so this vanishes identically
    second = float((frame.x_eps1.q - q3) @ (frame.x_eps1.v - frame.x3.v))
    out = {"first": first, "first_raw": raw, "second": second, "entry_shift": shift,
           "chain_a": None, "chain_b": None}
    if frame.mode == POST and frame.q3_tilde is not None:
        out["chain_a"] = float((q1 - frame.q3_tilde) @ (frame.v3 - a))
        out["chain_b"] = float((q1 - frame.q3_tilde) @ (v1 - frame.v3))
    vals = [out["first"], out["second"]] + [v for v in (out["chain_a"], out["chain_b"]) if v is not None]
    out["ok"] = all(v >= tol for v in vals)
    out["perpendicularity"] = float(abs((frame.x_eps1.q - q3) @ a))
    return out


def random_convex_frame(rng: np.random.Generator, mode: str = POST) -> SyncFrame:
    """Table-free frame with random circle front and singular point."""
    R = rng.uniform(0.2, 2.0)
    th0 = rng.uniform(0.0, 2.0 * math.pi)
    a = np.array([math.cos(th0), math.sin(th0)])
    e = np.array([-a[1], a[0]]) * (1.0 if rng.random() < 0.5 else -1.0)
    theta = 10.0 ** rng.uniform(-5, -0.7)
    C = rng.uniform(-1, 1, 2)
    dist = R * (rng.uniform(0.05, 0.99) if mode == POST else rng.uniform(1.01, 3.0))
    u = math.cos(theta) * a + math.sin(theta) * e
    X = C + dist * u
    return assemble_frame(C, R, a, e, theta, X, X, mode=mode)


# ------------------------------------------------------------ strip

@dataclass
class StripRegion:
    frame: SyncFrame
    n_events: int
    thetas: np.ndarray
    paths: list
    u0: BaseNeighborhood | None
    frame_table: Table | None = None

    @property
    def edges(self):
        return self.paths[0], self.paths[-1]

    @property
    def itinerary(self):
        return self.paths[0].itinerary

    def landing(self) -> np.ndarray:
        return np.array([[p.landing.r, p.landing.phi] for p in self.paths])

    def landing_in_u0(self) -> np.ndarray:
        if self.u0 is None:
            return np.ones(len(self.paths), bool)
        return np.array([self.u0.contains(involution(self.frame_table, p.landing))
                         for p in self.paths])

    def landing_monotone(self) -> bool:
        L = self.landing()
        if len(L) < 2:
            return True
        ok = True
        for col in (0, 1):
            d = np.diff(L[:, col])
            ok &= bool(np.all(d >= 0) or np.all(d <= 0))
        return ok

    def area(self) -> float:
        total = 0.0
        for k in range(self.n_events):
            seg = np.array([p.legs[k] for p in self.paths])
            seg = _align(self.frame_table, seg, seg[0, :2])
            poly = np.vstack([seg[:, :2], seg[::-1, 2:]])
            x, y = poly[:, 0], poly[:, 1]
            total += 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        return total


def _align(table, seg, ref):
    """Shift torus copies of the segments so their starts sit near ``ref``."""
    if table is None or table.ambient != "torus":
        return seg
    w, h = table.rectangle
    out = seg.copy()
    sx = np.round((ref[0] - seg[:, 0]) / w) * w
    sy = np.round((ref[1] - seg[:, 1]) / h) * h
    out[:, 0] += sx
    out[:, 2] += sx
    out[:, 1] += sy
    out[:, 3] += sy
    return out


def build_strip(table: Table, frame: SyncFrame, n: int | None = None, n_samples: int = 200,
                u0: BaseNeighborhood | None = None) -> StripRegion:
    """Sweep Sigma-hat (``n_samples`` rays) through n+1 collisions.

    ``u0`` defaults to the ball of radius 0.05 around ``frame.x``; the front
    lands near -x, so a landing point counts as inside when its involution is.

    Raises
    ------
    SmoothnessBroken
        A sample meets S_0 or the itinerary changes across the front.
    """
    n = frame.n if n is None else n
    if u0 is None and frame.x is not None:
        u0 = BaseNeighborhood(frame.x, 0.05)
    thetas = np.linspace(0.0, frame.theta, max(int(n_samples), 2))
    paths = []
    for th in thetas:
        q, u = frame.ray(th)
        paths.append(_trace(table, q, u, n + 1))
    it = paths[0].itinerary
    for p in paths:
        if p.itinerary != it:
            raise SmoothnessBroken("itinerary changes across the front")
    return StripRegion(frame, n + 1, thetas, paths, u0, table)


def _first_leg_time(table, frame, th):
    q, u = frame.ray(th)
    return _trace(table, q, u, 1).times[0, 1]


def in_first_leg(table: Table, frame: SyncFrame, q) -> bool:
    """Is q inside the part of the strip swept before the first collision?"""
    psi, rho = frame.polar(q)
    if not 0.0 <= psi <= frame.theta or rho < frame.radius:
        return False
    return rho <= frame.radius + _first_leg_time(table, frame, psi)


def _bisect_root(f, lo, hi, iters=80):
    flo = f(lo) > 0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if (f(mid) > 0) == flo:
            lo = mid
        else:
            hi = mid
    return hi


def _entry_time(table, frame, q, v, t_max, n_grid=256):
    """First time the line q + t v is in the first-leg strip, or None.

    The strip can be far thinner than the grid step, so each boundary
    condition is rooted separately and the roots are tried in order.
    """
    if in_first_leg(table, frame, q):
        return 0.0
    bounds = [lambda t: frame.polar(q + t * v)[0],
              lambda t: frame.polar(q + t * v)[0] - frame.theta,
              lambda t: frame.polar(q + t * v)[1] - frame.radius]
    ts = np.linspace(0.0, t_max, n_grid)
    roots = []
    for f in bounds:
        vals = np.array([f(t) for t in ts])
        for i in np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:])):
            roots.append(_bisect_root(f, ts[i], ts[i + 1]))
    for t in sorted(roots):
        if t > t_max:
            break
        if in_first_leg(table, frame, q + t * v):
            return float(t)
    inside = [in_first_leg(table, frame, q + t * v) for t in ts]
    if not any(inside):
        return None
    i = inside.index(True)
    return float(_bisect_root(lambda t: 1.0 if in_first_leg(table, frame, q + t * v) else -1.0,
                              ts[i - 1], ts[i], 60))


def _seg_intersect(a, b):
    p, r = a[:2], a[2:] - a[:2]
    q, s = b[:2], b[2:] - b[:2]
    den = r[0] * s[1] - r[1] * s[0]
    if den == 0.0:
        return None
    qp = q - p
    t = (qp[0] * s[1] - qp[1] * s[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t
    return None


def _point_seg(p, s):
    a, b = s[:2], s[2:]
    d = b - a
    L = d @ d
    t = 0.0 if L == 0 else min(max((p - a) @ d / L, 0.0), 1.0)
    return float(np.linalg.norm(p - a - t * d))


def _seg_dist(a, b):
    if _seg_intersect(a, b) is not None:
        return 0.0
    return min(_point_seg(a[:2], b), _point_seg(a[2:], b), _point_seg(b[:2], a), _point_seg(b[2:], a))


@dataclass
class ContainmentVerdict:
    contained: bool
    footpoint_inside: bool
    entered_at: float | None
    itinerary_ok: bool = False
    ordered: bool = False
    min_edge_distance: float = math.nan
    landing: CollisionCoord | None = None
    landing_in_u0: bool = False
    reason: str = ""


def strip_contains_orbit(strip: StripRegion, x3: FlowPoint | None = None,
                         horizon: int | None = None) -> ContainmentVerdict:
    """Does the orbit of ``x3`` stay in the strip until it lands?

    The footpoint is checked first.  A point starting outside must enter the
    strip during its first flight (pre-tangency mode); from the entry on, its
    legs must not meet the edge trajectories, its hits must lie between the
    edges' hits, and the landing point must fall in U0.

    Raises
    ------
    EdgeCrossing
        The footpoint path crosses an edge trajectory after entering.
    """
    table, frame = strip.frame_table, strip.frame
    x3 = frame.x3 if x3 is None else x3
    n_ev = strip.n_events if horizon is None else min(int(horizon), strip.n_events)
    inside = in_first_leg(table, frame, x3.q)
    try:
        path = _trace(table, x3.q, x3.v, n_ev)
    except SmoothnessBroken as exc:
        return ContainmentVerdict(False, inside, None, reason=f"orbit of x3 is singular: {exc}")
    t_in = 0.0 if inside else _entry_time(table, frame, x3.q, x3.v, path.times[0, 1])
    if t_in is None:
        return ContainmentVerdict(False, False, None, reason="footpoint outside the strip")
    v = ContainmentVerdict(False, inside, t_in)
    edges = strip.edges
    if path.itinerary != strip.itinerary[:n_ev]:
        v.reason = "itinerary differs from the front"
        return v
    v.itinerary_ok = True
    ordered = True
    for k in range(n_ev):
        u = path.events[k][1]
        ua, ub = edges[0].events[k][1], edges[1].events[k][1]
        ordered &= (u - ua) * (ub - u) > 0.0
    v.ordered = bool(ordered)
    mu = 1e-4 * frame.radius if t_in > 0 else 0.0
    dmin = math.inf
    for k in range(n_ev):
        seg = path.legs[k].copy()
        t0 = path.times[k, 0]
        if k == 0 and t_in > 0:
            seg[:2] = seg[:2] + (t_in + mu) * x3.v
            t0 += t_in + mu
        for edge in edges:
            e = _align(table, edge.legs[k][None, :], seg[:2])[0]
            s = _seg_intersect(seg, e)
            if s is not None:
                t_cross = t0 + s * (path.times[k, 1] - t0)
                raise EdgeCrossing(f"x3 crosses an edge trajectory on leg {k + 1}", t_cross)
            dmin = min(dmin, _seg_dist(seg, e))
    v.min_edge_distance = dmin
    v.landing = path.landing
    v.landing_in_u0 = strip.u0 is None or strip.u0.contains(involution(table, path.landing))
    v.contained = bool(v.ordered and dmin > 0.0 and v.landing_in_u0)
    if not v.contained:
        v.reason = "hits out of order" if not v.ordered else (
            "touches an edge" if dmin <= 0 else "landing outside U0")
    return v


# ------------------------------------------------------------ fixtures

@dataclass(frozen=True)
class BadPointFixture:
    table: str
    x: CollisionCoord
    n: int
    offset: float
    eps1_floor: float
    expected_mode: str

    def to_dict(self):
        return {"table": self.table, "component": self.x.component, "r": self.x.r,
                "phi": self.x.phi, "material": self.x.material, "n": self.n, "offset": self.offset,
                "eps1_floor": self.eps1_floor, "expected_mode": self.expected_mode}

    @classmethod
    def from_dict(cls, d):
        x = CollisionCoord(int(d["component"]), float(d["r"]), float(d["phi"]),
                           bool(d.get("material", True)))
        return cls(d["table"], x, int(d["n"]), float(d["offset"]), float(d["eps1_floor"]), d["expected_mode"])


def _coord_at(table, j, u, d):
    P = table.packed
    p = K.point_xy(P, j, u)
    nx, ny = K.normal_xy(P, j, *p)
    return CollisionCoord(int(j), float(P[j, OFF] + u), float(K.angle_from(nx, ny, d[0], d[1])),
                          bool(P[j, MAT] == 1.0))


def _pull_back(table, m_n: CollisionCoord, n: int):
    """x with T^n x = m_n, or None if the backward orbit is singular."""
    y = involution(table, m_n)
    rows = orbit(table, y, n)
    if len(rows) < n or any(int(c) in _SINGULAR for c in rows[:, 10]):
        return None
    last = rows[n - 1]
    j, r, ph = K.involution_coord(table.packed, int(last[1]), last[2], last[3])
    return CollisionCoord(int(j), float(r), float(ph), bool(table.packed[int(j), MAT] == 1.0))


def _aim(table, X, d, n, offset):
    """Fixture whose leg n -> n+1 passes the point X + offset (direction d)."""
    P = table.packed
    t, j, u, cls = K.next_event(P, X[0], X[1], -d[0], -d[1], -1)
    if j < 0 or cls in _SINGULAR:
        return None
    m_n = _coord_at(table, j, u, d)
    return _pull_back(table, m_n, n)


def sinai_fixture(rng: np.random.Generator, n: int = 2, table: Table | None = None):
    """Orbit whose leg after step n passes within a small offset of a disk tangency."""
    table = sinai() if table is None else table
    P = table.packed
    arc = int(np.flatnonzero((P[:, KIND] == 1.0) & (P[:, MAT] == 1.0))[0])
    c, rho = np.array([P[arc, AX], P[arc, AY]]), P[arc, RHO]
    a = rng.uniform(0.0, 2.0 * math.pi)
    nrm = np.array([math.cos(a), math.sin(a)])
    d = np.array([-nrm[1], nrm[0]]) * (1.0 if rng.random() < 0.5 else -1.0)
    off = 10.0 ** rng.uniform(-4.7, -3.7)
    x = _aim(table, c + (rho + off) * nrm, d, n, off)
    return None if x is None else BadPointFixture("sinai", x, n, off, 1e-9, POST)


def pocket_fixture(rng: np.random.Generator, n: int = 2, table: Table | None = None):
    """Collision just below the pocket corner followed by a near-tangency of the pocket arc.

    With ``eps1_floor = 1e-2`` the tangency comes too soon after the collision
    for any scanned eps1, so the frame is built in pre-tangency mode.
    """
    table = pocket_square() if table is None else table
    P = table.packed
    arc = int(np.flatnonzero((P[:, KIND] == 1.0) & (P[:, MAT] == 1.0))[0])
    c, rho = np.array([P[arc, AX], P[arc, AY]]), P[arc, RHO]
    gap = 10.0 ** rng.uniform(-7, -5)
    p = np.array([c[0], c[1] - rho - gap])
    D = rho + gap
    beta = math.asin(rho / D)
    d = np.array([-math.sin(beta), math.cos(beta)])
    dx = math.sqrt(D * D - rho * rho)
    off = dx * 10.0 ** rng.uniform(-3, -2)
    gamma = off / dx
    cg, sg = math.cos(gamma), math.sin(gamma)
    d = np.array([cg * d[0] - sg * d[1], sg * d[0] + cg * d[1]])
    t, j, u, cls = K.next_event(P, p[0] + 1e-3 * d[0], p[1] + 1e-3 * d[1], -d[0], -d[1], -1)
    if j < 0 or cls in _SINGULAR:
        return None
    x = _pull_back(table, _coord_at(table, j, u, d), n)
    return None if x is None else BadPointFixture("pocket", x, n, off, 1e-2, FALLBACK)


FIXTURE_TABLES = {"sinai": sinai, "pocket": pocket_square}


def make_fixtures(kind: str, count: int, seed: int, n: int = 2, validate: bool = True) -> list:
    """``count`` fixtures of the given kind ('sinai' or 'pocket').

    With ``validate`` each candidate must produce a frame in the expected mode
    and a smooth strip; others are discarded.
    """
    rng = np.random.default_rng(seed)
    maker = {"sinai": sinai_fixture, "pocket": pocket_fixture}[kind]
    table = FIXTURE_TABLES[kind]()
    out = []
    for _ in range(200 * count):
        if len(out) == count:
            break
        fx = maker(rng, n, table)
        if fx is None:
            continue
        if validate:
            try:
                fr = build_sync_frame(table, fx.x, fx.n, eps1_floor=fx.eps1_floor)
                if fr.mode != fx.expected_mode or fr.singular_kind != "tangency":
                    continue
                build_strip(table, fr, n_samples=8)
            except (NoSingularEndpoint, SingularEncounter):
                continue
        out.append(fx)
    return out


def write_fixtures(path, fixtures) -> None:
    with open(path, "w") as fh:
        json.dump([f.to_dict() for f in fixtures], fh, indent=2)
        fh.write("\n")


def load_fixtures(path) -> list:
    with open(path) as fh:
        return [BadPointFixture.from_dict(d) for d in json.load(fh)]


def check_fixture(fixture: BadPointFixture, n_samples: int = 200) -> dict:
    """Frame, two-point products and strip containment of one fixture.

    The strip is built at ``n_samples`` and ``2 * n_samples`` rays; ``stable``
    says the two containment verdicts agree.  A footpoint outside the strip is
    acceptable only in pre-tangency mode, where the orbit must enter during
    its first flight.
    """
    table = FIXTURE_TABLES[fixture.table]()
    frame = build_sync_frame(table, fixture.x, fixture.n, eps1_floor=fixture.eps1_floor)
    lmf = lmf_check(frame)
    verdicts = [strip_contains_orbit(build_strip(table, frame, n_samples=m))
                for m in (n_samples, 2 * n_samples)]
    v = verdicts[0]
    foot_ok = v.footpoint_inside or (frame.mode == FALLBACK and v.entered_at is not None)
    return {"table": fixture.table, "mode": frame.mode, "expected_mode": fixture.expected_mode,
            "theta": frame.theta, "eps1": frame.eps1, "lmf_first": lmf["first"],
            "lmf_second": lmf["second"], "lmf_ok": lmf["ok"],
            "footpoint_inside": v.footpoint_inside, "entered_at": v.entered_at,
            "footpoint_ok": bool(foot_ok), "contained": v.contained,
            "landing_in_u0": v.landing_in_u0, "min_edge_distance": v.min_edge_distance,
            "stable": all(w.contained == v.contained for w in verdicts),
            "reason": v.reason}


# ------------------------------------------------------------ foliation

@dataclass
class FoliationChart:
    table: Table
    curve: object
    eps0: float
    base: list
    q0: np.ndarray
    v0: np.ndarray
    normal: np.ndarray
    extent_plus: np.ndarray
    extent_minus: np.ndarray
    truncated: list

    def point(self, i: int, s: float) -> FlowPoint:
        return FlowPoint(self.q0[i] + s * self.normal[i], self.v0[i])

    def carrier(self, i: int, s) -> np.ndarray:
        s = np.asarray(s, float)
        return self.q0[i] + s[..., None] * self.normal[i]

    def collision(self, i: int, s: float) -> CollisionCoord:
        """Collision coordinate where the line of Psi(y0, s) leaves the source."""
        P = self.table.packed
        j = self.base[i].component
        b = self.q0[i] + s * self.normal[i]
        fx, fy, ok = _foot(P, j, b[0], b[1], self.v0[i, 0], self.v0[i, 1])
        if not ok:
            raise FiberCollision("fiber point outside the chart domain")
        nx, ny = K.normal_xy(P, j, fx, fy)
        r = self.table.nearest_r((fx, fy))
        return CollisionCoord(j, r, float(K.angle_from(nx, ny, *self.v0[i])))


def _in_domain(P, j, q, v):
    return _foot(P, j, q[0], q[1], v[0], v[1])[2]


def foliation_chart(table: Table, curve, eps0: float, n_fibers: int = 200,
                    strict: bool = False) -> FoliationChart:
    """Constant-velocity fibers through points of a traced S_1 curve.

    The fiber through y0 = (q0, v0) is s -> (q0 + s v0^perp, v0), unit speed in
    s.  It is cut where its line stops leaving the source component of y0
    (the chart domain); cuts are listed in ``truncated``.

    Raises
    ------
    PreconditionViolated
        The curve does not come from an arc tangency.
    FiberCollision
        With ``strict``, if any fiber is shorter than ``eps0``.
    """
    if curve.source != SOURCE_NAMES[TANGENCY]:
        raise PreconditionViolated("foliation charts need a tangency-type S_1 curve")
    P = table.packed
    fam = shot_families(table)[curve.family]
    idx = np.unique(np.linspace(0, len(curve.params) - 1, min(n_fibers, len(curve.params))).astype(int))
    base, q0, v0 = [], [], []
    for p in np.asarray(curve.params)[idx]:
        j, r, ph = _shot(P, fam, p, curve.order)
        if j < 0:
            continue
        m = CollisionCoord(int(j), float(r), float(ph), bool(P[j, MAT] == 1.0))
        qx, qy, vx, vy = K.coord_to_state(P, m.component, m.r, m.phi)
        base.append(m)
        q0.append((qx, qy))
        v0.append((vx, vy))
    q0, v0 = np.array(q0), np.array(v0)
    nrm = np.column_stack([-v0[:, 1], v0[:, 0]])
    ext = np.full((len(base), 2), eps0)
    truncated = []
    for i, m in enumerate(base):
        for k, sg in enumerate((1.0, -1.0)):
            grid = np.linspace(0.0, eps0, 65)[1:]
            ok = [_in_domain(P, m.component, q0[i] + sg * s * nrm[i], v0[i]) for s in grid]
            if all(ok):
                continue
            f = ok.index(False)
            lo, hi = (grid[f - 1] if f else 0.0), grid[f]
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if _in_domain(P, m.component, q0[i] + sg * mid * nrm[i], v0[i]):
                    lo = mid
                else:
                    hi = mid
            ext[i, k] = lo
            truncated.append((i, int(sg), lo))
    if strict and truncated:
        raise FiberCollision(f"{len(truncated)} fiber sides shorter than eps0")
    return FoliationChart(table, curve, eps0, base, q0, v0, nrm, ext[:, 0], ext[:, 1], truncated)


def fibers_disjoint(chart: FoliationChart, n_s: int = 21) -> float:
    """Smallest phase-space distance between samples of different fibers."""
    pts, owner = [], []
    for i in range(len(chart.base)):
        s = np.linspace(-chart.extent_minus[i], chart.extent_plus[i], n_s)
        q = chart.carrier(i, s)
        pts.append(np.column_stack([q, np.repeat(chart.v0[i][None, :], n_s, 0)]))
        owner.append(np.full(n_s, i))
    pts, owner = np.vstack(pts), np.concatenate(owner)
    tree = cKDTree(pts)
    d, nb = tree.query(pts, k=min(n_s + 1, len(pts)))
    other = owner[nb] != owner[:, None]
    d = np.where(other, d, np.inf)
    best = float(d.min())
    if not math.isfinite(best):
        # every neighbour in the k-list came from the same fiber; fall back to a full check
        best = math.inf
        for i in range(len(chart.base)):
            mask = owner != i
            if mask.any():
                best = min(best, float(cKDTree(pts[mask]).query(pts[owner == i])[0].min()))
    return best
