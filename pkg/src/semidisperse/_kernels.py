"""Compiled scalar kernels for ray casting and the collision map.

All kernels take the packed component array ``P`` built by
:func:`semidisperse.geometry.build_table`.  Intersections are closed form;
there is no iterative root finding on the hot path.
"""

import math

import numba as nb
import numpy as np

from .geometry import (AX, AY, CURV, EX, EY, FULL, KIND, LEN, MAT, NX, NY, OFF,
                       PARTNER, RHO, SHX, SHY, SWEEP, TH0)

TANGENT_TOL = 1e-10
CORNER_U_TOL = 1e-10

REGULAR, TANGENTIAL, CORNER, TRANSPARENT, KCORNER, NONE = 0, 1, 2, 3, 4, -1

jit = nb.njit(cache=True, fastmath=False)
TWO_PI = 2.0 * math.pi


@jit
def arc_param(P, j, px, py):
    """Arc-length parameter of a circle point along component ``j`` (may exceed span)."""
    th = math.atan2(py - P[j, AY], px - P[j, AX])
    sg = 1.0 if P[j, SWEEP] > 0 else -1.0
    d = ((th - P[j, TH0]) * sg) % TWO_PI
    rho = P[j, RHO]
    if P[j, FULL] == 1.0:
        return d * rho
    # fold values just below 2*pi onto small negatives so the start corner is detectable
    if d * rho > P[j, LEN] + CORNER_U_TOL and (TWO_PI - d) * rho < 1e-6:
        return -(TWO_PI - d) * rho
    return d * rho


@jit
def hit_component(P, j, qx, qy, vx, vy):
    """Forward hit time of the ray on component j from the billiard side, or inf."""
    if P[j, KIND] == 0.0:
        nx, ny = P[j, NX], P[j, NY]
        d = vx * nx + vy * ny
        if d >= 0.0:
            return math.inf, 0.0
        num = (P[j, AX] - qx) * nx + (P[j, AY] - qy) * ny
        t = num / d
        if t <= 0.0:
            return math.inf, 0.0
        u = (qx + t * vx - P[j, AX]) * P[j, EX] + (qy + t * vy - P[j, AY]) * P[j, EY]
        if u < -CORNER_U_TOL or u > P[j, LEN] + CORNER_U_TOL:
            return math.inf, 0.0
        return t, u
    wx, wy = qx - P[j, AX], qy - P[j, AY]
    b = wx * vx + wy * vy
    if b >= 0.0:
        return math.inf, 0.0
    rho = P[j, RHO]
    c0 = wx * wx + wy * wy - rho * rho
    if c0 < 0.0:
        return math.inf, 0.0
    disc = b * b - c0
    if disc < 0.0:
        return math.inf, 0.0
    t = c0 / (-b + math.sqrt(disc))
    if t <= 0.0:
        return math.inf, 0.0
    u = arc_param(P, j, qx + t * vx, qy + t * vy)
    if u < -CORNER_U_TOL or u > P[j, LEN] + CORNER_U_TOL:
        return math.inf, 0.0
    return t, u


@jit
def next_event(P, qx, qy, vx, vy, skip):
    """First boundary event of the ray (q, v).

    Returns ``(t, j, u, cls)``; ``skip`` excludes one component (-1 for none).
    """
    best_t = math.inf
    best_j = -1
    best_u = 0.0
    for j in range(P.shape[0]):
        if j == skip:
            continue
        t, u = hit_component(P, j, qx, qy, vx, vy)
        if t < best_t:
            best_t, best_j, best_u = t, j, u
    if best_j < 0:
        return math.inf, -1, 0.0, NONE
    j = best_j
    u = min(max(best_u, 0.0), P[j, LEN])
    near_end = P[j, FULL] == 0.0 and (best_u < CORNER_U_TOL or best_u > P[j, LEN] - CORNER_U_TOL)
    if P[j, MAT] == 0.0:
        return best_t, j, u, KCORNER if near_end else TRANSPARENT
    if near_end:
        return best_t, j, u, CORNER
    nx, ny = normal_xy(P, j, qx + best_t * vx, qy + best_t * vy)
    if abs(vx * nx + vy * ny) < TANGENT_TOL:
        return best_t, j, u, TANGENTIAL
    return best_t, j, u, REGULAR


@jit
def normal_xy(P, j, px, py):
    """Normal pointing into Q at a point of component j."""
    if P[j, KIND] == 0.0:
        return P[j, NX], P[j, NY]
    dx, dy = px - P[j, AX], py - P[j, AY]
    h = math.hypot(dx, dy)
    return dx / h, dy / h


@jit
def point_xy(P, j, u):
    if P[j, KIND] == 0.0:
        return P[j, AX] + u * P[j, EX], P[j, AY] + u * P[j, EY]
    sg = 1.0 if P[j, SWEEP] > 0 else -1.0
    th = P[j, TH0] + sg * u / P[j, RHO]
    return P[j, AX] + P[j, RHO] * math.cos(th), P[j, AY] + P[j, RHO] * math.sin(th)


@jit
def component_index(P, r):
    m = P.shape[0]
    for j in range(m - 1):
        if r < P[j + 1, OFF]:
            return j
    return m - 1


@jit
def coord_to_state(P, j, r, phi):
    """(component, r, phi) -> (qx, qy, vx, vy) with v post-collisional."""
    u = r - P[j, OFF]
    px, py = point_xy(P, j, u)
    nx, ny = normal_xy(P, j, px, py)
    c, s = math.cos(phi), math.sin(phi)
    return px, py, c * nx - s * ny, s * nx + c * ny


@jit
def angle_from(nx, ny, vx, vy):
    return math.atan2(nx * vy - ny * vx, nx * vx + ny * vy)


@jit
def resolve(P, t, j, u, qx, qy, vx, vy):
    """Apply an event returned by :func:`next_event`.

    Returns ``(j', r', phi', px, py, wx, wy, K, cos_phi)`` where (px, py, wx, wy) is
    the post-event state (wrapped through transparent walls).
    """
    px, py = qx + t * vx, qy + t * vy
    if P[j, MAT] == 0.0:
        k = int(P[j, PARTNER])
        px += P[j, SHX]
        py += P[j, SHY]
        u2 = P[k, LEN] - u
        nx, ny = P[k, NX], P[k, NY]
        cphi = vx * nx + vy * ny
        return k, P[k, OFF] + u2, angle_from(nx, ny, vx, vy), px, py, vx, vy, 0.0, cphi
    nx, ny = normal_xy(P, j, px, py)
    d = vx * nx + vy * ny
    wx, wy = vx - 2.0 * d * nx, vy - 2.0 * d * ny
    # keep |v| = 1 so round-off cannot compound over long orbits
    h = math.hypot(wx, wy)
    wx, wy = wx / h, wy / h
    return j, P[j, OFF] + u, angle_from(nx, ny, wx, wy), px, py, wx, wy, P[j, CURV], -d


@jit
def map_batch(P, comp, r, phi, out_comp, out_r, out_phi, out_tau, out_cls):
    """Vector collision map over arrays of collision coordinates."""
    for i in range(r.shape[0]):
        qx, qy, vx, vy = coord_to_state(P, comp[i], r[i], phi[i])
        t, j, u, cls = next_event(P, qx, qy, vx, vy, -1)
        out_cls[i] = cls
        out_tau[i] = t
        if j < 0:
            out_comp[i] = -1
            out_r[i] = np.nan
            out_phi[i] = np.nan
            continue
        k, rr, ph, _, _, _, _, _, _ = resolve(P, t, j, u, qx, qy, vx, vy)
        out_comp[i] = k
        out_r[i] = rr
        out_phi[i] = ph


@jit
def involution_coord(P, j, r, phi):
    """Collision-space involution.  Material: phi -> -phi.  Transparent: the
    identified point on the partner wall with phi unchanged."""
    if P[j, MAT] == 1.0:
        return j, r, -phi
    k = int(P[j, PARTNER])
    u = r - P[j, OFF]
    return k, P[k, OFF] + (P[k, LEN] - u), phi


@jit
def orbit(P, qx, qy, vx, vy, n, out):
    """Follow ``n`` events from a flow state.  Rows of ``out``:
    t, comp, r, phi, px, py, wx, wy, K, cos_phi, cls.  Returns events completed
    (stops after recording a singular event)."""
    for i in range(n):
        t, j, u, cls = next_event(P, qx, qy, vx, vy, -1)
        if j < 0:
            out[i, 10] = NONE
            return i
        k, r, ph, px, py, wx, wy, K, cp = resolve(P, t, j, u, qx, qy, vx, vy)
        out[i, 0] = t
        out[i, 1] = k
        out[i, 2] = r
        out[i, 3] = ph
        out[i, 4] = px
        out[i, 5] = py
        out[i, 6] = wx
        out[i, 7] = wy
        out[i, 8] = K
        out[i, 9] = cp
        out[i, 10] = cls
        if cls == TANGENTIAL or cls == CORNER or cls == KCORNER:
            return i + 1
        qx, qy, vx, vy = px, py, wx, wy
    return n


@jit
def orbit_from_coord(P, j, r, phi, n, out):
    qx, qy, vx, vy = coord_to_state(P, j, r, phi)
    return orbit(P, qx, qy, vx, vy, n, out)


@jit
def flat_log_expansion(P, j, r, phi, n):
    """Sum of log flight factors of a flat front along n events, and
    the number of material collisions.  Returns (logD, n_material, ok)."""
    qx, qy, vx, vy = coord_to_state(P, j, r, phi)
    B = 0.0
    logd = 0.0
    nmat = 0
    for i in range(n):
        t, jj, u, cls = next_event(P, qx, qy, vx, vy, -1)
        if jj < 0 or cls == TANGENTIAL or cls == CORNER or cls == KCORNER:
            return logd, nmat, False
        k, rr, ph, px, py, wx, wy, K, cp = resolve(P, t, jj, u, qx, qy, vx, vy)
        f = 1.0 + t * B
        logd += math.log(f)
        B = B / f
        if P[jj, MAT] == 1.0:
            nmat += 1
            B += 2.0 * K / cp
        qx, qy, vx, vy = px, py, wx, wy
    return logd, nmat, True


@jit
def front_log_D(P, qx, qy, vx, vy, B, n):
    """Propagate a front of curvature B carried by the ray (q, v) through n events.

    Returns ``(logD, done, B_end, itinerary)`` where ``done < n`` flags a
    singular event at step ``done + 1`` (logD then covers the completed legs
    only) and ``itinerary`` hashes the sequence of components hit.  Two rays of
    one front with different itineraries are separated by a singular line.
    """
    logd = 0.0
    sig = 0
    for i in range(n):
        t, j, u, cls = next_event(P, qx, qy, vx, vy, -1)
        if j < 0 or cls == TANGENTIAL or cls == CORNER or cls == KCORNER:
            return logd, i, B, sig
        sig = sig * 1000003 + j + 1
        k, rr, ph, px, py, wx, wy, Kc, cp = resolve(P, t, j, u, qx, qy, vx, vy)
        f = 1.0 + t * B
        logd += math.log(abs(f))
        B = B / f
        if P[j, MAT] == 1.0 and i < n - 1:
            B += 2.0 * Kc / cp
        qx, qy, vx, vy = px, py, wx, wy
    return logd, n, B, sig


@jit
def reversed_log_D(rows, n, B0):
    """log D^n of a front of curvature B0 started at the reversal of event n of a
    forward orbit table (rows as produced by :func:`orbit`) and run back to the
    reversal of its starting point."""
    B = B0
    logd = 0.0
    for i in range(n - 1, -1, -1):
        t = rows[i, 0]
        f = 1.0 + t * B
        logd += math.log(f)
        B = B / f
        if i > 0 and rows[i - 1, 8] > 0.0:
            B += 2.0 * rows[i - 1, 8] / rows[i - 1, 9]
    return logd


@jit
def run_until_witness(P, qx, qy, vx, vy, max_events, w, h):
    """Follow one branch until it hits a curved side regularly, meets a material
    corner, or uses up ``max_events`` iterates of T.

    Returns ``(status, events, t, qx, qy, vx, vy, j, u, tangential_arc_hits)``
    with status 0 witness, 1 horizon, 2 corner (state is the pre-corner ray and
    (j, u) the corner event), 3 escape.  Rectangle corners on a torus are passed
    straight through.
    """
    total = 0.0
    tang = 0
    for i in range(max_events):
        t, j, u, cls = next_event(P, qx, qy, vx, vy, -1)
        if j < 0:
            return 3, i, total, qx, qy, vx, vy, -1, 0.0, tang
        if cls == CORNER:
            return 2, i, total, qx, qy, vx, vy, j, u, tang
        k, rr, ph, px, py, wx, wy, Kc, cp = resolve(P, t, j, u, qx, qy, vx, vy)
        total += t
        if cls == KCORNER:
            if px >= w - 1e-12 and wx > 0.0:
                px -= w
            elif px <= 1e-12 and wx < 0.0:
                px += w
            if py >= h - 1e-12 and wy > 0.0:
                py -= h
            elif py <= 1e-12 and wy < 0.0:
                py += h
        elif cls == TANGENTIAL and P[j, CURV] > 0.0:
            tang += 1
        elif cls == REGULAR and P[j, CURV] > 0.0:
            return 0, i + 1, total, px, py, wx, wy, j, u, tang
        qx, qy, vx, vy = px, py, wx, wy
    return 1, max_events, total, qx, qy, vx, vy, -1, 0.0, tang
