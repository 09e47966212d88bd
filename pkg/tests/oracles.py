"""Independent reference computations used by the tests.

Nothing here calls the curvature-transport formulas under test: fronts are
probed by tracing neighbouring rays through the real dynamics and measuring
distances and fitted circles.
"""

import math

import numpy as np

from semidisperse.dynamics import FlowPoint, flow, orbit
from semidisperse.geometry import MAT


def circle_curvature(p1, p2, p3, v):
    """Signed curvature of the circle through three points; positive when the
    centre lies behind the front (divergent) relative to velocity ``v``."""
    a, b, c = map(np.asarray, (p1, p2, p3))
    d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if d == 0:
        return 0.0
    sa, sb, sc = a @ a, b @ b, c @ c
    ux = (sa * (b[1] - c[1]) + sb * (c[1] - a[1]) + sc * (a[1] - b[1])) / d
    uy = (sa * (c[0] - b[0]) + sb * (a[0] - c[0]) + sc * (b[0] - a[0])) / d
    centre = np.array([ux, uy])
    rho = np.hypot(*(b - centre))
    return math.copysign(1.0 / rho, float((b - centre) @ np.asarray(v)))


def arrival(table, x: FlowPoint, n_material: int, max_events: int = 200):
    """Flight time to the n-th material collision, the landing point and the
    incoming velocity, or None on a singular event."""
    P = table.packed
    rows = orbit(table, x, max_events)
    T, v, k = 0.0, x.v, 0
    for row in rows:
        if row[10] not in (0, 3):
            return None
        T += row[0]
        if P[int(row[1]), MAT] == 1:
            k += 1
            if k == n_material:
                return T, row[4:6].copy(), v
        v = row[6:8].copy()
    return None


def two_ray_expansion(table, front, n_material: int, h: float = 1e-7):
    """Finite-difference D of ``front`` up to its n-th material collision.

    Rays at carrier offsets +-h are traced to their n-th collision and carried
    back or forward along their incoming lines to the base ray's arrival time,
    which puts all three on one flow-synchronised front.
    """
    base = arrival(table, front.base, n_material)
    if base is None:
        return None
    pts = []
    for s in (h, -h):
        a = arrival(table, front.point(s), n_material)
        if a is None:
            return None
        T, q, v = a
        pts.append(q + (base[0] - T) * v)
    return math.hypot(*(pts[0] - pts[1])) / (2 * h)


def traced_curvature(table, front, t: float, h: float = 1e-4):
    """Curvature of the flow-synchronised front at time ``t``, from three rays."""
    xs = [flow(table, front.point(s), t) for s in (-h, 0.0, h)]
    return circle_curvature(xs[0].q, xs[1].q, xs[2].q, xs[1].v)

