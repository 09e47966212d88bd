"""Singularity sets S_n and the tubular radius z_tub.

S_1 = T^{-1} S_0 is traced by *shots*.  Every point of S_0 is a corner hit or
a tangential hit, so S_1 is swept out by casting rays backwards from corners
(over the cone of directions entering Q) and from tangency points of arcs
(both tangent orientations).  The first boundary point hit by the reversed
ray, together with the arriving velocity, is a point of S_1.  Forward shots
give S_-1 independently.  Higher orders come from composing with
T^{-1} = I T I (or T for negative orders) along the same shot parameter.

Each shot family is sampled adaptively in its parameter: intervals are
bisected until consecutive samples are within ``resolution`` in the (r, phi)
plane and the mid-sample deviates from the chord by less than a tenth of that.
Curves are split where the landing component changes, where a sample is
singular, and at jumps that survive bisection to machine precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from ._kernels import jit
from .dynamics import CollisionCoord, SingularEncounter
from .geometry import ARC, AX, AY, EX, EY, FULL, KIND, LEN, MAT, OFF, RHO, Table

TANGENCY, CORNER_SRC, TRANSPARENT_EDGE = 0, 1, 2
SOURCE_NAMES = {TANGENCY: "tangency", CORNER_SRC: "corner", TRANSPARENT_EDGE: "transparent-edge"}
MAX_ORDER = 6


class ResolutionTooCoarse(ValueError):
    """Resolution cannot separate neighbouring curves (or the sample budget ran out)."""


class SingularBase(SingularEncounter):
    """z_tub is undefined at a point of S_0."""


class NoSingularityCurves(RuntimeError):
    pass


@dataclass(frozen=True)
class SingularityCurve:
    order: int
    source: str
    polyline: np.ndarray
    component: int
    resolution: float
    params: np.ndarray | None = None
    family: int = -1

    def length(self) -> float:
        d = np.diff(self.polyline, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


@dataclass(frozen=True)
class TubularRadius:
    value: float
    limiting_obstruction: str
    plus: float = math.nan
    minus: float = math.nan


# --------------------------------------------------------------------- S_0

def s0_set(table: Table) -> dict:
    """Description of S_0: tangency lines on arcs and corner fibers."""
    P = table.packed
    tang = [(j, float(P[j, OFF]), float(P[j, OFF] + P[j, LEN]))
            for j in range(P.shape[0]) if P[j, KIND] == ARC and P[j, MAT] == 1]
    fibers = []
    for j in range(P.shape[0]):
        if P[j, MAT] == 1 and not table.components[j].is_closed:
            fibers += [(j, float(P[j, OFF])), (j, float(P[j, OFF] + P[j, LEN]))]
    out = {
        "tangency_lines": [{"component": j, "r_range": (a, b), "phi": (-math.pi / 2, math.pi / 2)}
                           for j, a, b in tang],
        "corner_points": [tuple(map(float, c)) for c in table.corners],
        "corner_fibers": [{"component": j, "r": r} for j, r in fibers],
        "transparent_corners": [],
    }
    if table.ambient == "torus":
        w, h = table.rectangle
        out["transparent_corners"] = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
    return out


# ----------------------------------------------------------- shot families

# family row: kind, px, py, theta_lo, theta_hi, arc index, sigma, source
FK, FPX, FPY, FLO, FHI, FARC, FSIG, FSRC = range(8)


def _angle(v):
    return math.atan2(v[1], v[0])


def shot_families(table: Table) -> np.ndarray:
    """Parameter families sweeping S_0, one row per family."""
    rows = []
    comps = table.components
    for p, normals in zip(table.corners, table.corner_normals):
        # boundary arrives along comp a (tangent T1) and leaves along comp b (T2)
        a = b = None
        for j, c in enumerate(comps):
            if not c.material or c.is_closed:
                continue
            if np.hypot(*(c.end - p)) < 1e-9:
                a = j
            if np.hypot(*(c.start - p)) < 1e-9:
                b = j
        t_in = comps[a].tangent(comps[a].length)
        t_out = comps[b].tangent(0.0)
        lo = _angle(t_out)
        width = (_angle(-t_in) - lo) % (2 * math.pi)
        rows.append((0, p[0], p[1], lo, lo + width, -1, 0, CORNER_SRC))
    if table.ambient == "torus":
        w, h = table.rectangle
        for k, (cx, cy) in enumerate([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]):
            lo = k * math.pi / 2
            rows.append((0, cx, cy, lo, lo + math.pi / 2, -1, 0, TRANSPARENT_EDGE))
    P = table.packed
    for j in range(P.shape[0]):
        if P[j, KIND] == ARC and P[j, MAT] == 1:
            for sig in (1.0, -1.0):
                rows.append((1, 0.0, 0.0, 0.0, P[j, LEN], j, sig, TANGENCY))
    return np.array(rows, dtype=float).reshape(-1, 8)


@jit
def _shot_origin(P, fam, p):
    """Shot start point and unit direction along which the particle *arrives*
    (backward use) or *leaves* (forward use)."""
    if fam[FK] == 0.0:
        return fam[FPX], fam[FPY], math.cos(p), math.sin(p), -1
    j = int(fam[FARC])
    px, py = K.point_xy(P, j, p)
    nx, ny = K.normal_xy(P, j, px, py)
    s = fam[FSIG]
    return px, py, -s * ny, s * nx, j


@jit
def _step_T(P, j, r, phi):
    qx, qy, vx, vy = K.coord_to_state(P, j, r, phi)
    t, jj, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
    if jj < 0 or (cls != K.REGULAR and cls != K.TRANSPARENT):
        return -1, 0.0, 0.0
    k, rr, ph, _, _, _, _, _, _ = K.resolve(P, t, jj, u, qx, qy, vx, vy)
    return k, rr, ph


@jit
def _shot(P, fam, p, order):
    """Point of S_order swept by parameter p of a family; component -1 if singular."""
    px, py, dx, dy, skip = _shot_origin(P, fam, p)
    if order > 0:
        # corners: d is the cast direction; tangencies: d is the arriving velocity
        if fam[FK] == 0.0:
            cx, cy = dx, dy
        else:
            cx, cy = -dx, -dy
        t, j, u, cls = K.next_event(P, px, py, cx, cy, skip)
        if j < 0 or (cls != K.REGULAR and cls != K.TRANSPARENT):
            return -1, 0.0, 0.0
        yx, yy = px + t * cx, py + t * cy
        nx, ny = K.normal_xy(P, j, yx, yy)
        r = P[j, OFF] + u
        phi = K.angle_from(nx, ny, -cx, -cy)
        for _ in range(order - 1):
            j, r, phi = K.involution_coord(P, j, r, phi)
            j, r, phi = _step_T(P, j, r, phi)
            if j < 0:
                return -1, 0.0, 0.0
            j, r, phi = K.involution_coord(P, j, r, phi)
        return j, r, phi
    t, j, u, cls = K.next_event(P, px, py, dx, dy, skip)
    if j < 0 or (cls != K.REGULAR and cls != K.TRANSPARENT):
        return -1, 0.0, 0.0
    j, r, phi, _, _, _, _, _, _ = K.resolve(P, t, j, u, px, py, dx, dy)
    for _ in range(-order - 1):
        j, r, phi = _step_T(P, j, r, phi)
        if j < 0:
            return -1, 0.0, 0.0
    return j, r, phi


@jit
def _shot_batch(P, fam, ps, order, oc, orr, oph):
    for i in range(ps.shape[0]):
        oc[i], orr[i], oph[i] = _shot(P, fam, ps[i], order)


def _eval(P, fam, ps, order):
    n = ps.shape[0]
    oc, orr, oph = np.empty(n, np.int64), np.empty(n), np.empty(n)
    _shot_batch(P, fam, ps, order, oc, orr, oph)
    return oc, orr, oph


def _trace_family(P, fam, order, res, n0, budget):
    lo, hi = fam[FLO], fam[FHI]
    span = hi - lo
    eta = 1e-9 * span
    ps = np.linspace(lo + eta, hi - eta, n0)
    c, r, f = _eval(P, fam, ps, order)
    ptol = 1e-14 * max(1.0, abs(lo), abs(hi))
    done = np.zeros(len(ps) - 1, bool)
    dev_tol = 0.1 * res
    while True:
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        if len(ps) > budget:
            raise ResolutionTooCoarse(f"sample budget {budget} exceeded; use a coarser resolution")
        a, b = todo, todo + 1
        pm = 0.5 * (ps[a] + ps[b])
        cm, rm, fm = _eval(P, fam, pm, order)
        small = (ps[b] - ps[a]) < ptol
        va, vb, vm = c[a] >= 0, c[b] >= 0, cm >= 0
        same = va & vb & vm & (c[a] == c[b]) & (cm == c[a])
        dr, df = r[b] - r[a], f[b] - f[a]
        seg = np.hypot(dr, df)
        # distance of the mid-sample from the chord
        ex, ey = rm - r[a], fm - f[a]
        cross = np.abs(ex * df - ey * dr) / np.where(seg > 0, seg, 1.0)
        ok = same & (seg <= res) & (cross <= dev_tol) & (np.hypot(ex, ey) <= res)
        both_invalid = ~va & ~vb & ~vm
        accept = ok | small | both_invalid
        done[a[accept]] = True
        split = a[~accept]
        if split.size == 0:
            continue
        # insert mid-samples after each split index
        ins = split + 1
        ps = np.insert(ps, ins, pm[~accept])
        c = np.insert(c, ins, cm[~accept])
        r = np.insert(r, ins, rm[~accept])
        f = np.insert(f, ins, fm[~accept])
        # each split pair becomes two undone pairs
        done = np.insert(done, ins, False)
        done[split] = False
    return ps, c, r, f


def _split_curves(ps, c, r, f, res):
    curves = []
    start = None
    for i in range(len(ps)):
        if c[i] < 0:
            if start is not None and i - start >= 2:
                curves.append(slice(start, i))
            start = None
            continue
        if start is None:
            start = i
            continue
        if c[i] != c[i - 1] or math.hypot(r[i] - r[i - 1], f[i] - f[i - 1]) > res:
            if i - start >= 2:
                curves.append(slice(start, i))
            start = i
    if start is not None and len(ps) - start >= 2:
        curves.append(slice(start, len(ps)))
    return curves


def trace_Sn(table: Table, n: int, resolution: float = 1e-3, max_order: int = MAX_ORDER,
             n0: int = 257, budget: int = 20_000_000) -> list[SingularityCurve]:
    """Trace S_n (n != 0) as polylines in (r, phi).

    Raises
    ------
    ResolutionTooCoarse
        If ``resolution`` is too large to tell neighbouring components apart,
        or refinement exceeds ``budget`` samples.
    """
    if n == 0 or abs(n) > max_order:
        raise ValueError(f"order must satisfy 0 < |n| <= {max_order}")
    P = table.packed
    if not 0 < resolution <= 0.25 * float(P[:, LEN].min()):
        raise ResolutionTooCoarse(f"resolution {resolution!r} cannot separate boundary components")
    out = []
    for k, fam in enumerate(shot_families(table)):
        ps, c, r, f = _trace_family(P, fam, n, resolution, n0, budget)
        for sl in _split_curves(ps, c, r, f, resolution):
            out.append(SingularityCurve(n, SOURCE_NAMES[int(fam[FSRC])],
                                        np.column_stack([r[sl], f[sl]]), int(c[sl][0]),
                                        resolution, ps[sl], k))
    return out


def involution_image(table: Table, curves) -> list[np.ndarray]:
    """Apply x -> -x to traced polylines (returns plain arrays)."""
    P = table.packed
    out = []
    for cv in curves:
        pts = np.empty_like(cv.polyline)
        for i, (r, f) in enumerate(cv.polyline):
            _, pts[i, 0], pts[i, 1] = K.involution_coord(P, cv.component, r, f)
        out.append(pts)
    return out


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.spatial import cKDTree
    da = cKDTree(b).query(a)[0].max()
    db = cKDTree(a).query(b)[0].max()
    return float(max(da, db))


def slope_signs(curve: SingularityCurve, min_step: float = 1e-12) -> np.ndarray:
    """Signs of d(phi)/dr between consecutive samples (steps shorter than
    ``min_step`` in r are skipped)."""
    d = np.diff(curve.polyline, axis=0)
    keep = np.abs(d[:, 0]) > min_step
    return np.sign(d[keep, 1] / d[keep, 0])


def export_curves(curves, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# curve_id; order_n: singularity order; source: tangency|corner|transparent-edge; "
                 "r: arc length; phi: radians\n")
        w = csv.writer(fh)
        w.writerow(["curve_id", "order_n", "source", "r", "phi"])
        for i, cv in enumerate(curves):
            for r, f in cv.polyline:
                w.writerow([i, cv.order, cv.source, repr(float(r)), repr(float(f))])


# ------------------------------------------------------------ grid oracle

def grid_discontinuity(table: Table, n_r: int = 2000, n_phi: int = 2000):
    """Classify the dual cells of an ``n_r x n_phi`` cell-centred node grid.

    A cell is discontinuous when its four nodes land on different components
    or any node lands singularly.  Cells whose nodes start on different
    components are excluded.  Returns ``(disc, excluded, r_nodes, phi_nodes)``.
    """
    L = table.total_boundary_length
    rn = (np.arange(n_r) + 0.5) * (L / n_r)
    fn = -math.pi / 2 + (np.arange(n_phi) + 0.5) * (math.pi / n_phi)
    src = np.array([table.component_of(x) for x in rn])
    R, F = np.meshgrid(rn, fn, indexing="ij")
    comp = np.repeat(src, n_phi)
    from .dynamics import collision_map_batch
    tc, _, _, _, cls = collision_map_batch(table, comp, R.ravel(), F.ravel())
    tc = tc.reshape(n_r, n_phi)
    sing = ~np.isin(cls.reshape(n_r, n_phi), (K.REGULAR, K.TRANSPARENT))
    c00, c10, c01, c11 = tc[:-1, :-1], tc[1:, :-1], tc[:-1, 1:], tc[1:, 1:]
    disc = (c00 != c10) | (c00 != c01) | (c00 != c11)
    disc |= sing[:-1, :-1] | sing[1:, :-1] | sing[:-1, 1:] | sing[1:, 1:]
    excluded = np.repeat((src[:-1] != src[1:])[:, None], n_phi - 1, axis=1)
    return disc, excluded, rn, fn


@jit
def _raster_segment(x0, y0, x1, y1, out, sliver):
    nx, ny = out.shape
    dx, dy = x1 - x0, y1 - y0
    ts = [0.0, 1.0]
    if dx != 0.0:
        a, b = min(x0, x1), max(x0, x1)
        k = math.floor(a) + 1
        while k < b:
            ts.append((k - x0) / dx)
            k += 1
    if dy != 0.0:
        a, b = min(y0, y1), max(y0, y1)
        k = math.floor(a) + 1
        while k < b:
            ts.append((k - y0) / dy)
            k += 1
    ts.sort()
    seglen = math.hypot(dx, dy)
    for i in range(len(ts) - 1):
        if (ts[i + 1] - ts[i]) * seglen <= sliver:
            continue
        tm = 0.5 * (ts[i] + ts[i + 1])
        cx = int(math.floor(x0 + tm * dx))
        cy = int(math.floor(y0 + tm * dy))
        if 0 <= cx < nx and 0 <= cy < ny:
            out[cx, cy] = True


@jit
def _raster_poly(X, Y, out, sliver):
    for i in range(X.shape[0] - 1):
        _raster_segment(X[i], Y[i], X[i + 1], Y[i + 1], out, sliver)


def rasterize(curves, r_nodes, phi_nodes, sliver: float = 1e-4) -> np.ndarray:
    """Dual cells crossed by the polylines (pieces shorter than ``sliver`` cell
    widths are ignored)."""
    dr = r_nodes[1] - r_nodes[0]
    dphi = phi_nodes[1] - phi_nodes[0]
    out = np.zeros((len(r_nodes) - 1, len(phi_nodes) - 1), bool)
    for cv in curves:
        X = (cv.polyline[:, 0] - r_nodes[0]) / dr
        Y = (cv.polyline[:, 1] - phi_nodes[0]) / dphi
        _raster_poly(np.ascontiguousarray(X), np.ascontiguousarray(Y), out, sliver)
    return out


def grid_agreement(table: Table, curves, n: int = 2000, sliver: float = 1e-4) -> dict:
    """Compare traced S_1 curves with the grid scan: coverage and false claims."""
    disc, excl, rn, fn = grid_discontinuity(table, n, n)
    claimed = rasterize(curves, rn, fn, sliver)
    use = ~excl
    target = disc & use
    hit = claimed & target
    false = claimed & ~disc & use
    return {"grid_cells": int(target.sum()), "covered": int(hit.sum()),
            "coverage": float(hit.sum() / max(target.sum(), 1)),
            "false_claims": int(false.sum()), "claimed": int((claimed & use).sum()),
            "false_mask": false, "missed_mask": target & ~claimed}


# ------------------------------------------------------------------ z_tub

@jit
def _foot(P, js, bx, by, vx, vy):
    """Footpoint on the source component of the line through b with direction v."""
    if P[js, KIND] == 0.0:
        nx, ny = K.normal_xy(P, js, 0.0, 0.0)
        d = vx * nx + vy * ny
        if d == 0.0:
            return math.nan, math.nan, False
        t = -((bx - P[js, AX]) * nx + (by - P[js, AY]) * ny) / d
        fx, fy = bx + t * vx, by + t * vy
        u = (fx - P[js, AX]) * P[js, EX] + (fy - P[js, AY]) * P[js, EY]
        return fx, fy, -K.CORNER_U_TOL <= u <= P[js, LEN] + K.CORNER_U_TOL
    wx, wy = bx - P[js, AX], by - P[js, AY]
    b = wx * vx + wy * vy
    disc = b * b - (wx * wx + wy * wy - P[js, RHO] ** 2)
    if disc < 0.0:
        return math.nan, math.nan, False
    t = -b + math.sqrt(disc)
    fx, fy = bx + t * vx, by + t * vy
    u = K.arc_param(P, js, fx, fy)
    inside = P[js, FULL] == 1.0 or (-K.CORNER_U_TOL <= u <= P[js, LEN] + K.CORNER_U_TOL)
    return fx, fy, inside


@jit
def _confirm(P, js, qx, qy, vx, vy, ex, ey, s, X, Y, skip):
    """Is the singular point (X, Y) on the link of the line at offset s?"""
    bx, by = qx + s * ex, qy + s * ey
    fx, fy, ok = _foot(P, js, bx, by, vx, vy)
    if not ok:
        return True
    if math.hypot(X - fx, Y - fy) < 1e-9:
        return True
    tX = (X - fx) * vx + (Y - fy) * vy
    if tX <= 1e-12:
        return False
    t, j, u, cls = K.next_event(P, fx, fy, vx, vy, skip)
    return t >= tX - 1e-9


@jit
def ztub_kernel(P, corners, corner_kind, js, qx, qy, vx, vy):
    """One-sided reaches (plus, kind_plus, minus, kind_minus) of the flat front
    through (q, v) with source component js.  Kinds: 0 corner, 1 tangency,
    2 source tangency or source end, 3 transparent corner."""
    ex, ey = -vy, vx
    m = corners.shape[0]
    na = 0
    for j in range(P.shape[0]):
        if P[j, KIND] == 1.0 and P[j, MAT] == 1.0:
            na += 1
    nc = m + 2 * na
    cs = np.empty(nc)
    cX = np.empty(nc)
    cY = np.empty(nc)
    ck = np.empty(nc, np.int64)
    csk = np.empty(nc, np.int64)
    k = 0
    for i in range(m):
        X, Y = corners[i, 0], corners[i, 1]
        cs[k] = (X - qx) * ex + (Y - qy) * ey
        cX[k], cY[k] = X, Y
        ck[k] = 3 if corner_kind[i] == 1 else 0
        csk[k] = -1
        k += 1
    for j in range(P.shape[0]):
        if P[j, KIND] == 1.0 and P[j, MAT] == 1.0:
            cx, cy, rho = P[j, AX], P[j, AY], P[j, RHO]
            d0 = (cx - qx) * ex + (cy - qy) * ey
            a0 = (cx - qx) * vx + (cy - qy) * vy
            for sg in (-1.0, 1.0):
                s = d0 + sg * rho
                X = qx + s * ex + a0 * vx
                Y = qy + s * ey + a0 * vy
                u = K.arc_param(P, j, X, Y)
                cs[k] = s
                cX[k], cY[k] = X, Y
                if P[j, FULL] == 1.0 or (-K.CORNER_U_TOL <= u <= P[j, LEN] + K.CORNER_U_TOL):
                    ck[k] = 2 if j == js else 1
                else:
                    ck[k] = -1
                csk[k] = j
                k += 1
    res = np.full(2, math.inf)
    kinds = np.full(2, -1, np.int64)
    order = np.argsort(cs)
    for side in range(2):
        sgn = 1.0 if side == 0 else -1.0
        idx = order if side == 0 else order[::-1]
        for ii in range(nc):
            i = idx[ii]
            if ck[i] < 0:
                continue
            s = cs[i]
            if sgn * s < 0.0:
                continue
            kind = ck[i]
            # a tangent line of the source circle is always reached by the foot
            if kind == 2 or _confirm(P, js, qx, qy, vx, vy, ex, ey, s, cX[i], cY[i], csk[i]):
                res[side] = abs(s)
                fx, fy, ok = _foot(P, js, qx + s * ex, qy + s * ey, vx, vy)
                if kind == 2 or not ok or math.hypot(cX[i] - fx, cY[i] - fy) < 1e-9:
                    kinds[side] = 2
                else:
                    kinds[side] = kind
                break
    return res[0], kinds[0], res[1], kinds[1]


OBSTRUCTION = {0: "corner", 1: "singularity-hit", 2: "boundary-of-M", 3: "corner"}


def _corner_table(table):
    pts = [tuple(c) for c in table.corners]
    kinds = [0] * len(pts)
    if table.ambient == "torus":
        w, h = table.rectangle
        pts += [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
        kinds += [1] * 4
    return np.array(pts, dtype=float).reshape(-1, 2), np.array(kinds, dtype=np.int64)


def z_tub(table: Table, x: CollisionCoord, corner_data=None) -> TubularRadius:
    """Tubular radius of the link x -> Tx.

    The flat front through x is the family of lines parallel to v(x).  Each
    side is grown until the first line whose link from the source footpoint to
    the landing point meets a corner, touches an arc tangentially, or whose
    footpoint reaches a tangency or the end of the source component.  These
    critical offsets are available in closed form; each is confirmed by a ray
    cast.

    Raises
    ------
    SingularBase
        If x itself is a corner point or a tangential collision.
    """
    P = table.packed
    if abs(math.cos(x.phi)) < 1e-10 or (P[x.component, MAT] == 1 and table.is_corner(x.r)):
        raise SingularBase("x lies in S_0", state=x)
    pts, kinds = _corner_table(table) if corner_data is None else corner_data
    qx, qy, vx, vy = K.coord_to_state(P, x.component, x.r, x.phi)
    p, kp, m, km = ztub_kernel(P, pts, kinds, x.component, qx, qy, vx, vy)
    if p <= m:
        return TubularRadius(p, OBSTRUCTION.get(int(kp), "none"), p, m)
    return TubularRadius(m, OBSTRUCTION.get(int(km), "none"), p, m)


@jit
def ztub_batch(P, corners, corner_kind, comp, r, phi, out):
    for i in range(r.shape[0]):
        qx, qy, vx, vy = K.coord_to_state(P, comp[i], r[i], phi[i])
        a, _, b, _ = ztub_kernel(P, corners, corner_kind, comp[i], qx, qy, vx, vy)
        out[i] = min(a, b)


def z_tub_many(table: Table, comp, r, phi) -> np.ndarray:
    pts, kinds = _corner_table(table)
    out = np.empty(len(r))
    ztub_batch(table.packed, pts, kinds, np.ascontiguousarray(comp, np.int64),
               np.ascontiguousarray(r, float), np.ascontiguousarray(phi, float), out)
    return out


def ztub_grid(table: Table, n_r: int, n_phi: int, material_only: bool = True):
    """z_tub on a cell-centred (r, phi) grid; singular nodes get NaN."""
    L = table.total_boundary_length
    rn = (np.arange(n_r) + 0.5) * (L / n_r)
    fn = -math.pi / 2 + (np.arange(n_phi) + 0.5) * (math.pi / n_phi)
    src = np.array([table.component_of(x) for x in rn])
    R, F = np.meshgrid(rn, fn, indexing="ij")
    C = np.repeat(src, n_phi)
    z = z_tub_many(table, C, R.ravel(), F.ravel()).reshape(n_r, n_phi)
    if material_only:
        z[table.packed[src, MAT] == 0, :] = np.nan
    return rn, fn, z
