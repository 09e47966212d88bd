"""Billiard flow, collision map, and the time-reversal involution.

Collision coordinates follow one convention throughout the package: ``r`` is
global arc length (components traversed with Q on the left), and ``phi`` is the
signed angle from the inward normal to the post-collisional velocity, positive
counterclockwise.  Crossings of a transparent wall are recorded on the wall the
particle *enters*, measured against that wall's inward normal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import LEN, MAT, OFF, Table

CLASS_NAMES = {K.REGULAR: "regular", K.TANGENTIAL: "tangential", K.CORNER: "corner",
               K.TRANSPARENT: "transparent", K.KCORNER: "corner", K.NONE: "none"}


class SingularEncounter(RuntimeError):
    """The trajectory met S_0 (a corner or a tangency) before finishing."""

    def __init__(self, msg, time=math.nan, state=None):
        super().__init__(msg)
        self.time = time
        self.state = state


class CornerHit(SingularEncounter):
    """Trajectory runs into a corner; ``normals`` holds the two branch normals."""

    def __init__(self, point, normals, time=math.nan, state=None, transparent=False):
        super().__init__(f"corner hit at {tuple(np.round(point, 12))}", time, state)
        self.point = np.asarray(point, dtype=float)
        self.normals = tuple(np.asarray(n, dtype=float) for n in normals)
        self.transparent = transparent


class NumericalDegeneracy(SingularEncounter):
    """Landing is tangential within tolerance (|cos phi| < 1e-10)."""


@dataclass(frozen=True)
class FlowPoint:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(2)
        v = np.asarray(self.v, dtype=float).reshape(2)
        nv = math.hypot(*v)
        if nv == 0:
            raise ValueError("zero velocity")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v / nv)

    def __neg__(self):
        return FlowPoint(self.q, -self.v)

    def astuple(self):
        return (float(self.q[0]), float(self.q[1]), float(self.v[0]), float(self.v[1]))


@dataclass(frozen=True)
class CollisionCoord:
    component: int
    r: float
    phi: float
    material: bool = True


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    coord: CollisionCoord
    classification: str
    q: np.ndarray
    v: np.ndarray


def reflect(v, n):
    """Mirror reflection ``v - 2<n,v> n``; grazing vectors come back unchanged."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    return v - 2.0 * np.dot(n, v) * n


def coord(table: Table, r: float, phi: float, component: int | None = None) -> CollisionCoord:
    """Build a :class:`CollisionCoord`, looking up the owning component from ``r``."""
    j = table.component_of(r) if component is None else int(component)
    return CollisionCoord(j, float(r), float(phi), bool(table.packed[j, MAT] == 1.0))


def to_flow(table: Table, m: CollisionCoord) -> FlowPoint:
    """Phase point (q, v+) of a collision coordinate."""
    qx, qy, vx, vy = K.coord_to_state(table.packed, m.component, m.r, m.phi)
    return FlowPoint((qx, qy), (vx, vy))


def to_collision(table: Table, x: FlowPoint, component: int | None = None) -> CollisionCoord:
    """Collision coordinate of a phase point sitting on the boundary."""
    r = table.nearest_r(x.q)
    j = table.component_of(r) if component is None else component
    nx, ny = K.normal_xy(table.packed, j, *table.components[j].point(r - table.packed[j, OFF]))
    return coord(table, r, K.angle_from(nx, ny, x.v[0], x.v[1]), j)


def _event(table, x: FlowPoint) -> CollisionEvent:
    P = table.packed
    qx, qy, vx, vy = x.astuple()
    t, j, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
    if j < 0:
        raise SingularEncounter("ray escapes the table", state=x)
    k, r, ph, px, py, wx, wy, _, _ = K.resolve(P, t, j, u, qx, qy, vx, vy)
    if cls in (K.CORNER, K.KCORNER):
        p = np.array([qx + t * vx, qy + t * vy])
        normals = _corner_branches(table, j, u)
        raise CornerHit(p, normals, time=t, state=x, transparent=cls == K.KCORNER)
    m = CollisionCoord(int(k), float(r), float(ph), bool(P[k, MAT] == 1.0))
    return CollisionEvent(float(t), m, CLASS_NAMES[cls], np.array([px, py]), np.array([wx, wy]))


def _corner_branches(table, j, u):
    comps = table.components
    n_own = comps[j].left_normal(min(max(u, 0.0), comps[j].length))
    p = comps[j].point(min(max(u, 0.0), comps[j].length))
    for i, c in enumerate(comps):
        if i == j or c.material != comps[j].material:
            continue
        for w in (0.0, c.length):
            if not c.is_closed and math.hypot(*(c.point(w) - p)) < 1e-9:
                return (n_own, c.left_normal(w))
    return (n_own,)


def first_collision(table: Table, x: FlowPoint) -> CollisionEvent:
    """Next boundary event of the flow from ``x`` (material or transparent).

    Tangential landings are returned with ``classification == "tangential"``.

    Raises
    ------
    CornerHit
        The ray lands on a corner; the two branch normals are attached.
    """
    return _event(table, x)


def collision_map(table: Table, m: CollisionCoord) -> CollisionCoord:
    """One step of the collision map T on the enlarged collision space."""
    ev = _event(table, to_flow(table, m))
    if ev.classification == "tangential":
        raise NumericalDegeneracy("tangential landing", time=ev.time, state=m)
    return ev.coord


def collision_map_batch(table: Table, component, r, phi):
    """Vectorised T.  Returns ``(component, r, phi, tau, cls)`` arrays."""
    component = np.ascontiguousarray(component, dtype=np.int64)
    r = np.ascontiguousarray(r, dtype=float)
    phi = np.ascontiguousarray(phi, dtype=float)
    n = r.shape[0]
    oc, orr, oph = np.empty(n, np.int64), np.empty(n), np.empty(n)
    tau, cls = np.empty(n), np.empty(n, np.int64)
    K.map_batch(table.packed, component, r, phi, oc, orr, oph, tau, cls)
    return oc, orr, oph, tau, cls


def involution(table: Table, x):
    """Time reversal.  Flow points: ``(q, -v)``.  Collision points: ``phi -> -phi``
    on material components; on a transparent wall the same phase point read from
    the partner wall."""
    if isinstance(x, FlowPoint):
        return -x
    j, r, ph = K.involution_coord(table.packed, x.component, x.r, x.phi)
    return CollisionCoord(int(j), float(r), float(ph), x.material)


def flow(table: Table, x: FlowPoint, t: float, max_events: int = 10_000_000) -> FlowPoint:
    """Billiard flow Phi^t.  Tangential hits pass straight through.

    Raises
    ------
    CornerHit
        With ``time`` set to the elapsed time at the corner and ``state`` the
        phase point reached.
    """
    if t < 0:
        raise ValueError("flow is defined here for t >= 0")
    P = table.packed
    qx, qy, vx, vy = x.astuple()
    left = float(t)
    for _ in range(max_events):
        tau, j, u, cls = K.next_event(P, qx, qy, vx, vy, -1)
        if j < 0 or tau > left:
            return FlowPoint((qx + left * vx, qy + left * vy), (vx, vy))
        if cls in (K.CORNER, K.KCORNER):
            p = (qx + tau * vx, qy + tau * vy)
            raise CornerHit(p, _corner_branches(table, j, u), time=t - left + tau,
                            state=FlowPoint(p, (vx, vy)), transparent=cls == K.KCORNER)
        _, _, _, qx, qy, vx, vy, _, _ = K.resolve(P, tau, j, u, qx, qy, vx, vy)
        left -= tau
    raise SingularEncounter("event budget exhausted", time=t - left)


def orbit(table: Table, x, n: int) -> np.ndarray:
    """Up to ``n`` events from a flow point or collision coordinate.

    Columns: ``t, component, r, phi, qx, qy, vx, vy, K, cos_phi, class``.  The
    table is cut after the first singular event.
    """
    out = np.zeros((n, 11))
    if isinstance(x, CollisionCoord):
        k = K.orbit_from_coord(table.packed, x.component, x.r, x.phi, n, out)
    else:
        k = K.orbit(table.packed, *x.astuple(), n, out)
    return out[:k]


def dump_trajectory(table: Table, x, n: int, path) -> int:
    """Write ``n`` events as CSV rows; returns the number of rows written."""
    rows = orbit(table, x, n)
    with open(path, "w", newline="") as fh:
        fh.write("# event_index: collision count; t: flight time of the leg (length units); "
                 "component_id; r: arc length; phi: radians; q, v: post-event state; class\n")
        w = csv.writer(fh)
        w.writerow(["event_index", "t", "component_id", "r", "phi", "qx", "qy", "vx", "vy", "class"])
        for i, row in enumerate(rows):
            w.writerow([i + 1, repr(row[0]), int(row[1]), repr(row[2]), repr(row[3]),
                        repr(row[4]), repr(row[5]), repr(row[6]), repr(row[7]),
                        CLASS_NAMES[int(row[10])]])
    return len(rows)


def sample_nu(table: Table, n: int, rng: np.random.Generator, material_only: bool = True):
    """Draw ``n`` points from dnu = cos(phi) dr dphi (normalised).

    ``r`` is uniform over the chosen boundary part and ``phi = arcsin(2U - 1)``.
    Returns ``(component, r, phi)``.
    """
    P = table.packed
    mask = P[:, MAT] == 1.0 if material_only else np.ones(P.shape[0], bool)
    idx = np.flatnonzero(mask)
    lens = P[idx, LEN]
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    s = rng.random(n) * cum[-1]
    pos = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(idx) - 1)
    comp = idx[pos]
    r = P[comp, OFF] + (s - cum[pos])
    phi = np.arcsin(2.0 * rng.random(n) - 1.0)
    return comp.astype(np.int64), r, phi
