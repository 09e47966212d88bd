"""Wave fronts (local orthogonal manifolds) and their expansion along orbits.

A front is carried by a curve gamma in Q together with one of its unit normal
fields.  We track only the signed curvature ``B`` of the carrier at the base
ray (``B > 0`` divergent, ``B = 0`` flat, ``B < 0`` convergent).  Free flight
and reflection act by

    B -> B / (1 + t B)            (length of the front scales by |1 + t B|)
    B -> B + 2 K / cos(phi)       (reflection off a side of curvature K)

Expansion ``D^n`` is measured in the flow-synchronised norm, i.e. as arc length
along the carrier, so only flights contribute factors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .dynamics import CollisionCoord, FlowPoint, SingularEncounter, involution, orbit, to_flow
from .geometry import Table

GRAZING_TOL = 1e-10


class FocalPoint(ArithmeticError):
    """Free flight reaches the focus of a convergent front (1 + tB = 0)."""


class GrazingCollision(ArithmeticError):
    """Reflection at |phi| = pi/2 where the mirror law blows up."""


class ImmediateSingularity(SingularEncounter):
    """The base point itself lies on S_1 or S_-1."""


@dataclass(frozen=True)
class WaveFront:
    base: FlowPoint
    B: float
    half_extent: float = 0.0
    orientation: int = 1

    @property
    def kind(self) -> str:
        if self.B > 0:
            return "divergent"
        return "flat" if self.B == 0 else "convergent"

    def point(self, s: float) -> FlowPoint:
        """Phase point at signed carrier arc length ``s`` from the base.

        The carrier is the circle (or line) of curvature ``B`` tangent to
        ``v^perp`` at the base; velocities are the chosen unit normals.
        """
        q, v = self.base.q, self.base.v
        e = self.orientation * np.array([-v[1], v[0]])
        if self.B == 0.0:
            return FlowPoint(q + s * e, v)
        a = s * self.B
        w = math.cos(a) * v + math.sin(a) * e
        c = q - v / self.B
        return FlowPoint(c + w / self.B, w)


@dataclass(frozen=True)
class ExpansionRecord:
    n: int
    jacobian: float
    legs: tuple = field(default_factory=tuple)

    def factors(self) -> np.ndarray:
        return np.array([(leg[4], 1.0) for leg in self.legs]).reshape(-1, 2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# leg: 1-based flight index; t: flight time (length units); "
                     "B_before/B_after: carrier curvature at leg start/end (1/length); "
                     "factor: |1 + t B_before|\n")
            w = csv.writer(fh)
            w.writerow(["leg", "t", "B_before", "B_after", "factor"])
            for leg in self.legs:
                w.writerow([leg[0], repr(leg[1]), repr(leg[2]), repr(leg[3]), repr(leg[4])])


def propagate_free(front: WaveFront, t: float) -> WaveFront:
    """Free flight for time ``t`` along the base ray."""
    if t < 0:
        raise ValueError("t must be non-negative")
    f = 1.0 + t * front.B
    if f == 0.0 or (front.B < 0 and f <= 0.0):
        raise FocalPoint(f"focal point at t={-1.0 / front.B!r}")
    base = FlowPoint(front.base.q + t * front.base.v, front.base.v)
    return replace(front, base=base, B=front.B / f, half_extent=front.half_extent * abs(f))


def flight_factor(B: float, t: float) -> float:
    return abs(1.0 + t * B)


def propagate_collision(front: WaveFront, K_curv: float, phi: float, normal=None) -> WaveFront:
    """Mirror law at a side of curvature ``K_curv`` hit at angle ``phi``.

    If ``normal`` is given, the base velocity is reflected as well.
    """
    if K_curv < 0:
        raise ValueError("semi-dispersing sides have K >= 0")
    c = math.cos(phi)
    if abs(c) < GRAZING_TOL:
        raise GrazingCollision(f"phi={phi!r}")
    base = front.base
    if normal is not None:
        n = np.asarray(normal, dtype=float)
        base = FlowPoint(base.q, base.v - 2.0 * np.dot(n, base.v) * n)
    return replace(front, base=base, B=front.B + 2.0 * K_curv / abs(c))


def expansion(table: Table, x: CollisionCoord, n: int, B0: float = 0.0) -> ExpansionRecord:
    """Expansion of the front of post-collisional curvature ``B0`` at ``x``
    along the first ``n`` iterates of T (transparent crossings count as iterates).

    Raises
    ------
    SingularEncounter
        The orbit meets a corner or tangency before ``n`` events.
    """
    if n == 0:
        return ExpansionRecord(0, 1.0, ())
    rows = orbit(table, x, n)
    if len(rows) < n or rows[-1, 10] in (K.TANGENTIAL, K.CORNER, K.KCORNER):
        raise SingularEncounter(f"singular event at step {len(rows)}", state=x)
    B = B0
    D = 1.0
    legs = []
    for i, row in enumerate(rows):
        t = row[0]
        f = 1.0 + t * B
        if f <= 0:
            raise FocalPoint(f"focal point on leg {i + 1}")
        after = B / f
        legs.append((i + 1, float(t), float(B), float(after), float(f)))
        D *= f
        B = after
        if row[8] > 0 and i < n - 1:
            B += 2.0 * row[8] / row[9]
    return ExpansionRecord(n, D, tuple(legs))


def _forward_rows(table, x, n):
    rows = orbit(table, x, n)
    if len(rows) < n or (n and rows[-1, 10] in (K.TANGENTIAL, K.CORNER, K.KCORNER)):
        raise SingularEncounter(f"singular event at step {len(rows)}", state=x)
    return rows


def kappa_flat(table: Table, x: CollisionCoord, n: int, rows=None) -> float:
    """kappa_{n,0}: expansion of the flat front from -T^n x back to -x."""
    if n == 0:
        return 1.0
    rows = _forward_rows(table, x, n) if rows is None else rows
    return math.exp(K.reversed_log_D(rows, n, 0.0))


DEFAULT_B_GRID = (0.0,) + tuple(np.logspace(-2, 2, 9))


def _reversal_state(table, rows, n):
    """Phase point -T^n x, read on the entering wall when T^n x is a crossing."""
    r = rows[n - 1]
    j, rr, ph = K.involution_coord(table.packed, int(r[1]), r[2], r[3])
    return K.coord_to_state(table.packed, j, rr, ph)


def _front_D(P, q, v, B, s, n):
    e = np.array([-v[1], v[0]])
    if B == 0.0:
        qy, vy = q + s * e, v
    else:
        a = s * B
        vy = math.cos(a) * v + math.sin(a) * e
        qy = q - v / B + vy / B
    return K.front_log_D(P, qy[0], qy[1], vy[0], vy[1], B, n)


def _smooth(P, q, v, B, s, n, sig0):
    """The front point at offset s completes n events with the base itinerary."""
    _, done, _, sig = _front_D(P, q, v, B, s, n)
    return done == n and sig == sig0


def _clip(P, q, v, B, s, n, sig0, iters=60):
    """Largest fraction of ``s`` such that the front point stays smooth for n steps."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _smooth(P, q, v, B, mid * s, n, sig0):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return lo * s


def kappa(table: Table, x: CollisionCoord, n: int, delta: float,
          B_grid=DEFAULT_B_GRID, n_offsets: int = 2, rows=None) -> tuple[float, float]:
    """``(kappa_{n,0}, kappa_{n,delta})`` at ``x``.

    ``kappa_{n,delta}`` is the smallest D^n found over divergent fronts through
    -T^n x with curvature in ``B_grid`` and over front points whose image lies
    within ``delta`` of -x to first order (offsets up to delta / D^n), clipped at
    the first singular cut.  The flat front at the base is always included, so
    ``kappa_{n,delta} <= kappa_{n,0}``; values are floored at 1.
    """
    if n == 0:
        return 1.0, 1.0
    rows = _forward_rows(table, x, n) if rows is None else rows
    P = table.packed
    k0 = math.exp(K.reversed_log_D(rows, n, 0.0))
    qx, qy, vx, vy = _reversal_state(table, rows, n)
    q, v = np.array([qx, qy]), np.array([vx, vy])
    best = k0
    sig0 = _front_D(P, q, v, 0.0, 0.0, n)[3]
    fracs = np.arange(1, n_offsets + 1) / n_offsets
    for B in B_grid:
        dB = math.exp(K.reversed_log_D(rows, n, B))
        best = min(best, dB)
        smax = delta / dB
        for sign in (1.0, -1.0):
            for fr in fracs:
                s = sign * fr * smax
                if not _smooth(P, q, v, B, s, n, sig0):
                    s = _clip(P, q, v, B, s, n, sig0)
                    if _smooth(P, q, v, B, s, n, sig0):
                        best = min(best, math.exp(_front_D(P, q, v, B, s, n)[0]))
                    break
                best = min(best, math.exp(_front_D(P, q, v, B, s, n)[0]))
    return k0, max(best, 1.0)


def kappa_profile(table: Table, x: CollisionCoord, n_max: int, delta: float, **kw):
    """Arrays ``kappa_{n,0}`` and ``kappa_{n,delta}`` for n = 1..n_max.

    Both infima are nondecreasing in n; the grid estimates can dip by rounding
    (about 1e-11 relative) across transparent crossings, so the profile is
    reported as a running maximum.
    """
    rows = _forward_rows(table, x, n_max)
    k0 = np.empty(n_max)
    kd = np.empty(n_max)
    for n in range(1, n_max + 1):
        k0[n - 1], kd[n - 1] = kappa(table, x, n, delta, rows=rows[:n], **kw)
    k0 = np.maximum.accumulate(k0)
    return k0, np.minimum(np.maximum.accumulate(kd), k0)


def _singular_first_step(P, q, v):
    t, j, u, cls = K.next_event(P, q[0], q[1], v[0], v[1], -1)
    return j < 0 or cls in (K.TANGENTIAL, K.CORNER, K.KCORNER)


def approx_stable_manifold(table: Table, x: CollisionCoord, n_pullback: int,
                           delta_target: float, B_eps: float = 1e-6):
    """Finite-pullback approximation of the stable front through ``x``.

    For each k = 1..n_pullback a slightly divergent front (curvature ``B_eps``)
    at -T^k x is carried back to -x; its involution image is a convergent front
    through x whose forward image stays short for k steps.  The front is grown
    from x on both sides up to ``delta_target`` and cut where T^k stops being
    smooth.  The reported extent is the running minimum over k, so it never
    grows with ``n_pullback``.

    Returns ``(front, extents)`` with ``extents[k-1]`` the r^s estimate after k
    pullbacks.
    """
    P = table.packed
    xf = to_flow(table, x)
    xb = to_flow(table, involution(table, x))
    if _singular_first_step(P, xf.q, xf.v) or _singular_first_step(P, xb.q, xb.v):
        raise ImmediateSingularity("base point lies on S_1 or S_-1", state=x)
    rows = orbit(table, x, n_pullback)
    extents = np.zeros(n_pullback)
    front = WaveFront(xf, 0.0, delta_target)
    reach = delta_target
    for k in range(1, n_pullback + 1):
        if len(rows) < k or rows[k - 1, 10] in (K.TANGENTIAL, K.CORNER, K.KCORNER):
            reach = 0.0
            extents[k - 1:] = 0.0
            break
        Bu = _pull_curvature(rows, k, B_eps)
        front = WaveFront(xf, -Bu, reach)
        sig0 = _front_D(P, xf.q, xf.v, -Bu, 0.0, k)[3]
        for sign in (1.0, -1.0):
            s = sign * reach
            if not _smooth(P, xf.q, xf.v, -Bu, s, k, sig0):
                reach = min(reach, abs(_clip(P, xf.q, xf.v, -Bu, s, k, sig0)))
        extents[k - 1] = reach
    return replace(front, half_extent=reach), extents


def _pull_curvature(rows, k, B):
    """Curvature at -x of the front of curvature B started at -T^k x."""
    for i in range(k - 1, -1, -1):
        t = rows[i, 0]
        B = B / (1.0 + t * B)
        if i > 0 and rows[i - 1, 8] > 0.0:
            B += 2.0 * rows[i - 1, 8] / rows[i - 1, 9]
    # no kick at x itself: reversing the arrival at x gives the post-collisional front
    return B
