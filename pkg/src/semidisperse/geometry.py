"""Billiard tables built from straight segments and dispersing circular arcs.

A table is an immutable list of boundary components traversed with the
billiard domain Q on the left.  Each component owns a contiguous range of
the global arc-length coordinate ``r``.  On a torus the four sides of the
fundamental rectangle are appended as non-material (transparent) walls.

The packed float array ``Table.packed`` is what the compiled kernels in
:mod:`semidisperse._kernels` consume; its column layout is defined here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

CORNER_TOL = 1e-12

# packed column layout
KIND, MAT, AX, AY, BX, BY, RHO, TH0, SWEEP, LEN, OFF, CURV = range(12)
NX, NY, EX, EY, PARTNER, SHX, SHY, FULL = range(12, 20)
NCOL = 20
SEGMENT, ARC = 0, 1


class TableError(ValueError):
    """Invalid table description."""


class OverlappingComponents(TableError):
    pass


class NonConvexArc(TableError):
    pass


class OpenBoundaryChain(TableError):
    pass


class CornerPoint(ValueError):
    """Raised at a corner, where two inward normals exist."""

    def __init__(self, r, normals):
        super().__init__(f"r={r!r} is a corner point")
        self.r = r
        self.normals = normals


class TransparentWall(ValueError):
    """Raised when a material quantity is requested on a transparent wall."""


@dataclass(frozen=True)
class BoundaryComponent:
    kind: str                      # "segment" | "arc"
    material: bool
    a: tuple = None                # segment start
    b: tuple = None                # segment end
    center: tuple = None
    radius: float = None
    from_angle: float = None
    sweep: float = None            # signed; negative = clockwise
    arc_length_offset: float = 0.0

    @property
    def length(self) -> float:
        if self.kind == "segment":
            return math.dist(self.a, self.b)
        return abs(self.sweep) * self.radius

    @property
    def curvature(self) -> float:
        return 1.0 / self.radius if self.kind == "arc" and self.material else 0.0

    @property
    def is_closed(self) -> bool:
        return self.kind == "arc" and abs(abs(self.sweep) - 2 * math.pi) < 1e-14

    def point(self, u: float) -> np.ndarray:
        if self.kind == "segment":
            a, b = np.asarray(self.a), np.asarray(self.b)
            return a + (b - a) * (u / self.length)
        th = self.from_angle + math.copysign(u / self.radius, self.sweep)
        return np.asarray(self.center) + self.radius * np.array([math.cos(th), math.sin(th)])

    def tangent(self, u: float) -> np.ndarray:
        """Unit tangent in the direction of traversal."""
        if self.kind == "segment":
            d = np.subtract(self.b, self.a)
            return d / np.hypot(*d)
        th = self.from_angle + math.copysign(u / self.radius, self.sweep)
        s = math.copysign(1.0, self.sweep)
        return s * np.array([-math.sin(th), math.cos(th)])

    def left_normal(self, u: float) -> np.ndarray:
        t = self.tangent(u)
        return np.array([-t[1], t[0]])

    @property
    def start(self) -> np.ndarray:
        return self.point(0.0)

    @property
    def end(self) -> np.ndarray:
        return self.point(self.length)

    def reversed(self) -> "BoundaryComponent":
        if self.kind == "segment":
            return BoundaryComponent("segment", self.material, a=self.b, b=self.a)
        return BoundaryComponent("arc", self.material, center=self.center, radius=self.radius,
                                 from_angle=self.from_angle + self.sweep, sweep=-self.sweep)


@dataclass(frozen=True)
class Table:
    """Validated billiard table.

    Attributes
    ----------
    components : tuple of BoundaryComponent
        Material components in authoring order, then transparent walls.
    corners : ndarray, shape (k, 2)
        Corner points of the material boundary.
    ambient : str
        ``"plane"`` or ``"torus"``.
    rectangle : tuple or None
        ``(width, height)`` of the fundamental rectangle on a torus.
    """

    components: tuple
    corners: np.ndarray
    ambient: str
    rectangle: tuple | None
    packed: np.ndarray = field(repr=False)
    corner_normals: tuple = field(repr=False, default=())

    @property
    def total_boundary_length(self) -> float:
        return float(self.packed[:, LEN].sum())

    @property
    def material_length(self) -> float:
        return float(self.packed[self.packed[:, MAT] == 1, LEN].sum())

    @property
    def transparent_walls(self) -> tuple:
        return tuple(c for c in self.components if not c.material)

    @property
    def has_curvature(self) -> bool:
        return bool(np.any(self.packed[:, CURV] > 0))

    def component_of(self, r: float) -> int:
        """Index of the component owning global arc length ``r``."""
        L = self.total_boundary_length
        if not 0.0 <= r < L + CORNER_TOL:
            raise ValueError(f"r={r!r} outside [0, {L})")
        offs = self.packed[:, OFF]
        return int(min(np.searchsorted(offs, r, side="right") - 1, len(offs) - 1))

    def _local(self, r: float) -> tuple[int, float]:
        j = self.component_of(r)
        return j, r - self.packed[j, OFF]

    def point_at(self, r: float) -> np.ndarray:
        j, u = self._local(r)
        return self.components[j].point(u)

    def is_corner(self, r: float, tol: float = 1e-10) -> bool:
        j, u = self._local(r)
        c = self.components[j]
        if c.is_closed:
            return False
        return u < tol or u > c.length - tol

    def nearest_r(self, p) -> float:
        """Global arc length of the boundary point closest to ``p``."""
        p = np.asarray(p, dtype=float)
        best, best_r = math.inf, 0.0
        for j, c in enumerate(self.components):
            off = self.packed[j, OFF]
            if c.kind == "segment":
                a, b = np.asarray(c.a), np.asarray(c.b)
                e = (b - a) / c.length
                u = float(np.clip(np.dot(p - a, e), 0.0, c.length))
            else:
                w = p - np.asarray(c.center)
                th = math.atan2(w[1], w[0])
                d = ((th - c.from_angle) * math.copysign(1.0, c.sweep)) % (2 * math.pi)
                span = abs(c.sweep)
                if d > span:
                    d = span if d - span < 2 * math.pi - d else 0.0
                u = d * c.radius
            dist = float(np.hypot(*(c.point(u) - p)))
            if dist < best:
                best, best_r = dist, off + u
        return best_r


def normal_at(table: Table, r: float) -> np.ndarray:
    """Inward unit normal (pointing into Q) at boundary arc length ``r``."""
    j, u = table._local(r)
    c = table.components[j]
    if not c.material:
        raise TransparentWall(f"r={r!r} lies on a transparent wall")
    if table.is_corner(r):
        raise CornerPoint(r, _corner_normals_at(table, r))
    return c.left_normal(u)


def curvature_at(table: Table, r: float) -> float:
    """Boundary curvature at ``r``: 0 on segments, 1/radius on arcs."""
    j, u = table._local(r)
    if table.is_corner(r):
        raise CornerPoint(r, _corner_normals_at(table, r))
    return table.components[j].curvature


def _corner_normals_at(table, r):
    p = table.point_at(r)
    for q, normals in zip(table.corners, table.corner_normals):
        if np.hypot(*(q - p)) < 1e-9:
            return normals
    return ()


# ---------------------------------------------------------------- building

def _parse_component(d: dict) -> BoundaryComponent:
    kind = d.get("type")
    if kind == "segment":
        a, b = tuple(map(float, d["a"])), tuple(map(float, d["b"]))
        if math.dist(a, b) == 0.0:
            raise TableError("degenerate segment")
        return BoundaryComponent("segment", True, a=a, b=b)
    if kind == "arc":
        rho = float(d["radius"])
        if not rho > 0:
            raise TableError("arc radius must be positive")
        if not d.get("convex_inward", True):
            raise NonConvexArc("arc declared focusing (convex_inward: false)")
        th0, th1 = float(d["from_angle"]), float(d["to_angle"])
        if th0 == th1 or abs(th1 - th0) > 2 * math.pi + 1e-12:
            raise TableError("arc angular span must be in (0, 2*pi]")
        sweep = th1 - th0
        if abs(abs(sweep) - 2 * math.pi) < 1e-12:
            sweep = math.copysign(2 * math.pi, sweep)
        return BoundaryComponent("arc", True, center=tuple(map(float, d["center"])),
                                 radius=rho, from_angle=th0, sweep=sweep)
    raise TableError(f"unknown component type {kind!r}")


def _ray_crossings(comp: BoundaryComponent, p, d) -> int:
    """Number of crossings of the ray p + t d (t > 0) with a component."""
    p, d = np.asarray(p), np.asarray(d)
    if comp.kind == "segment":
        a, b = np.asarray(comp.a), np.asarray(comp.b)
        m = np.array([d, a - b]).T
        if abs(np.linalg.det(m)) < 1e-15:
            return 0
        t, s = np.linalg.solve(m, a - p)
        return int(t > 0 and 0 <= s < 1)
    c = np.asarray(comp.center)
    w = p - c
    bb = w @ d
    disc = bb * bb - (w @ w - comp.radius ** 2)
    if disc <= 0:
        return 0
    n = 0
    for t in (-bb - math.sqrt(disc), -bb + math.sqrt(disc)):
        if t <= 0:
            continue
        q = p + t * d - c
        th = math.atan2(q[1], q[0])
        rel = ((th - comp.from_angle) * math.copysign(1.0, comp.sweep)) % (2 * math.pi)
        if rel < abs(comp.sweep) or comp.is_closed:
            n += 1
    return n


def _inside_q(material, ambient, rect, p) -> bool:
    if ambient == "torus" and not (0 < p[0] < rect[0] and 0 < p[1] < rect[1]):
        return False
    d = np.array([math.cos(0.7318), math.sin(0.7318)])
    k = sum(_ray_crossings(c, p, d) for c in material)
    return (k % 2 == 1) if ambient == "plane" else (k % 2 == 0)


def _orient(material, ambient, rect):
    out = []
    for c in material:
        u = 0.5 * c.length
        h = 1e-7 * max(1.0, c.length)
        p = c.point(u) + h * c.left_normal(u)
        if not _inside_q(material, ambient, rect, p):
            q = c.point(u) - h * c.left_normal(u)
            if not _inside_q(material, ambient, rect, q):
                raise TableError("component does not bound Q on either side")
            c = c.reversed()
        if c.kind == "arc" and c.sweep > 0:
            raise NonConvexArc("arc center lies on the billiard side (focusing arc)")
        out.append(c)
    return out


def _segment_intersections(c1, c2):
    """Intersection points of two components (closed-form)."""
    pts = []
    if c1.kind == "arc" and c2.kind == "segment":
        c1, c2 = c2, c1
    if c1.kind == "segment" and c2.kind == "segment":
        a, b, c, d = map(np.asarray, (c1.a, c1.b, c2.a, c2.b))
        m = np.array([b - a, c - d]).T
        det = np.linalg.det(m)
        if abs(det) < 1e-14:
            # parallel: overlap if collinear and projections overlap
            e = (b - a) / np.hypot(*(b - a))
            if abs(e[0] * (c - a)[1] - e[1] * (c - a)[0]) < 1e-12:
                s = sorted([0.0, float((b - a) @ e)])
                t = sorted([float((c - a) @ e), float((d - a) @ e)])
                lo, hi = max(s[0], t[0]), min(s[1], t[1])
                if hi - lo > CORNER_TOL:
                    pts.append(a + e * 0.5 * (lo + hi))
            return pts
        s, t = np.linalg.solve(m, c - a)
        if -1e-12 <= s <= 1 + 1e-12 and -1e-12 <= t <= 1 + 1e-12:
            pts.append(a + s * (b - a))
        return pts
    if c1.kind == "segment":
        a, b = np.asarray(c1.a), np.asarray(c1.b)
        d = b - a
        w = a - np.asarray(c2.center)
        A, B, C = d @ d, 2 * (w @ d), w @ w - c2.radius ** 2
        disc = B * B - 4 * A * C
        if disc < 0:
            return pts
        for s in ((-B - math.sqrt(disc)) / (2 * A), (-B + math.sqrt(disc)) / (2 * A)):
            if -1e-12 <= s <= 1 + 1e-12:
                p = a + s * d
                if _on_arc(c2, p):
                    pts.append(p)
        return pts
    # arc-arc
    c0, c1c = np.asarray(c1.center), np.asarray(c2.center)
    dd = np.hypot(*(c1c - c0))
    if dd < 1e-14:
        if abs(c1.radius - c2.radius) < 1e-14:
            pts.append(c1.point(0.5 * c1.length))  # conservative: same circle
        return pts
    r0, r1 = c1.radius, c2.radius
    if dd > r0 + r1 + 1e-12 or dd < abs(r0 - r1) - 1e-12:
        return pts
    a_ = (r0 ** 2 - r1 ** 2 + dd ** 2) / (2 * dd)
    h = math.sqrt(max(r0 ** 2 - a_ ** 2, 0.0))
    e = (c1c - c0) / dd
    m = c0 + a_ * e
    for sg in (1, -1):
        p = m + sg * h * np.array([-e[1], e[0]])
        if _on_arc(c1, p) and _on_arc(c2, p):
            pts.append(p)
    return pts


def _on_arc(c, p, tol=1e-12):
    w = np.asarray(p) - np.asarray(c.center)
    th = math.atan2(w[1], w[0])
    rel = ((th - c.from_angle) * math.copysign(1.0, c.sweep)) % (2 * math.pi)
    span = abs(c.sweep)
    return c.is_closed or rel <= span + tol / c.radius or rel >= 2 * math.pi - tol / c.radius


def _check_overlaps(comps):
    ends = [(c.start, c.end) for c in comps]
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            for p in _segment_intersections(comps[i], comps[j]):
                shared = any(np.hypot(*(p - e)) < 1e-9 for e in ends[i]) and \
                    any(np.hypot(*(p - e)) < 1e-9 for e in ends[j])
                if not shared or (comps[i].is_closed or comps[j].is_closed):
                    raise OverlappingComponents(
                        f"components {i} and {j} intersect at {tuple(np.round(p, 12))}")


def _chains_and_corners(comps):
    corners, normals = [], []
    for i, c in enumerate(comps):
        if c.is_closed:
            continue
        nxt = [j for j, d in enumerate(comps)
               if j != i and not d.is_closed and np.hypot(*(d.start - c.end)) <= CORNER_TOL]
        if len(nxt) != 1:
            raise OpenBoundaryChain(f"component {i} end {tuple(c.end)} is not joined")
        d = comps[nxt[0]]
        corners.append(np.array(c.end))
        normals.append((c.left_normal(c.length), d.left_normal(0.0)))
    return corners, normals


def _transparent_walls(w, h):
    pts = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
    return [BoundaryComponent("segment", False, a=pts[k], b=pts[(k + 1) % 4]) for k in range(4)]


def build_table(description: dict) -> Table:
    """Validate a structured table description and build a :class:`Table`.

    Parameters
    ----------
    description : dict
        ``{"ambient": "plane"|"torus", "rectangle": [w, h], "components": [...]}``
        with components ``{"type": "segment", "a": [x, y], "b": [x, y]}`` or
        ``{"type": "arc", "center": [x, y], "radius": rho, "from_angle": t0,
        "to_angle": t1, "convex_inward": true}``.

    Raises
    ------
    OverlappingComponents, NonConvexArc, OpenBoundaryChain
    """
    ambient = description.get("ambient", "plane")
    if ambient not in ("plane", "torus"):
        raise TableError(f"unknown ambient {ambient!r}")
    rect = None
    if ambient == "torus":
        rect = tuple(map(float, description["rectangle"]))
        if not (rect[0] > 0 and rect[1] > 0):
            raise TableError("rectangle sides must be positive")
    material = [_parse_component(d) for d in description.get("components", [])]
    if ambient == "plane" and not material:
        raise OpenBoundaryChain("plane table needs a closed boundary")

    if ambient == "torus":
        for c in material:
            lo, hi = _bbox(c)
            if lo[0] <= 0 or lo[1] <= 0 or hi[0] >= rect[0] or hi[1] >= rect[1]:
                raise OverlappingComponents("scatterer does not fit inside the rectangle")

    _check_overlaps(material)
    material = _orient(material, ambient, rect)
    corners, normals = _chains_and_corners(material)

    comps = list(material)
    if ambient == "torus":
        comps += _transparent_walls(*rect)

    packed = np.zeros((len(comps), NCOL))
    off = 0.0
    placed = []
    for j, c in enumerate(comps):
        c = BoundaryComponent(c.kind, c.material, a=c.a, b=c.b, center=c.center, radius=c.radius,
                              from_angle=c.from_angle, sweep=c.sweep, arc_length_offset=off)
        placed.append(c)
        row = packed[j]
        row[MAT] = 1.0 if c.material else 0.0
        row[LEN] = c.length
        row[OFF] = off
        row[PARTNER] = -1
        if c.kind == "segment":
            row[KIND] = SEGMENT
            row[AX:AY + 1] = c.a
            row[BX:BY + 1] = c.b
            e = c.tangent(0.0)
            row[EX], row[EY] = e
            row[NX], row[NY] = -e[1], e[0]
        else:
            row[KIND] = ARC
            row[AX:AY + 1] = c.center
            row[RHO], row[TH0], row[SWEEP] = c.radius, c.from_angle, c.sweep
            row[CURV] = 1.0 / c.radius
            row[FULL] = 1.0 if c.is_closed else 0.0
        off += c.length
    if ambient == "torus":
        base = len(material)
        w, h = rect
        shifts = {0: (2, (0.0, h)), 1: (3, (-w, 0.0)), 2: (0, (0.0, -h)), 3: (1, (w, 0.0))}
        for k, (p, s) in shifts.items():
            packed[base + k, PARTNER] = base + p
            packed[base + k, SHX:SHY + 1] = s
    packed.setflags(write=False)
    return Table(tuple(placed), np.array(corners).reshape(-1, 2), ambient, rect, packed,
                 tuple(normals))


def _bbox(c):
    if c.kind == "segment":
        pts = np.array([c.a, c.b])
        return pts.min(0), pts.max(0)
    u = np.linspace(0, c.length, 721)
    pts = np.array([c.point(x) for x in u])
    return pts.min(0) - 1e-9, pts.max(0) + 1e-9


def load_table(path) -> Table:
    """Read a table description file (YAML or JSON) and build it."""
    text = Path(path).read_text()
    desc = yaml.safe_load(text)
    if not isinstance(desc, dict):
        raise TableError(f"{path}: not a mapping")
    return build_table(desc)


def describe(table: Table) -> dict:
    """Inverse of :func:`build_table` for the material part."""
    out = {"ambient": table.ambient, "components": []}
    if table.rectangle:
        out["rectangle"] = list(table.rectangle)
    for c in table.components:
        if not c.material:
            continue
        if c.kind == "segment":
            out["components"].append({"type": "segment", "a": list(c.a), "b": list(c.b)})
        else:
            out["components"].append({"type": "arc", "center": list(c.center), "radius": c.radius,
                                      "from_angle": c.from_angle,
                                      "to_angle": c.from_angle + c.sweep, "convex_inward": True})
    return out


# ------------------------------------------------------- reference tables

def unit_square() -> Table:
    pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    return build_table({"ambient": "plane", "components": [
        {"type": "segment", "a": pts[k], "b": pts[(k + 1) % 4]} for k in range(4)]})


def sinai(radius: float = 0.4, center=(0.5, 0.5), size=(1.0, 1.0)) -> Table:
    return build_table({"ambient": "torus", "rectangle": list(size), "components": [
        {"type": "arc", "center": list(center), "radius": radius,
         "from_angle": 0.0, "to_angle": 2 * math.pi, "convex_inward": True}]})


def pocket_square(radius: float = 0.3) -> Table:
    """Unit square whose corner (1, 1) is replaced by a dispersing quarter circle."""
    a = 1.0 - radius
    return build_table({"ambient": "plane", "components": [
        {"type": "segment", "a": [0.0, 0.0], "b": [1.0, 0.0]},
        {"type": "segment", "a": [1.0, 0.0], "b": [1.0, a]},
        {"type": "arc", "center": [1.0, 1.0], "radius": radius,
         "from_angle": -math.pi / 2, "to_angle": -math.pi, "convex_inward": True},
        {"type": "segment", "a": [a, 1.0], "b": [0.0, 1.0]},
        {"type": "segment", "a": [0.0, 1.0], "b": [0.0, 0.0]},
    ]})


REFERENCE_TABLES = {"square": unit_square, "sinai": sinai, "pocket": pocket_square}


def dump_table(table: Table, path) -> None:
    Path(path).write_text(json.dumps(describe(table), indent=2) + "\n")
