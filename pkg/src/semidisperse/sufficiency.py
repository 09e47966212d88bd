"""Sufficiency of trajectory segments and an empirical Ansatz sampler.

A segment is sufficient when every branch of it (corner hits split the orbit
in two) collides regularly with a curved side.  Sufficiency of an infinite
semitrajectory cannot be refuted from a finite run, so the future and past
variants answer ``sufficient`` or ``undetermined`` only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import CollisionCoord, FlowPoint, involution, to_flow
from .geometry import MAT, OFF, Table
from .singularity import (NoSingularityCurves, _shot, shot_families, trace_Sn)

SUFFICIENT = "sufficient"
INSUFFICIENT = "insufficient-by-horizon"
UNDETERMINED = "undetermined"
DEFAULT_BUDGET = 64


class BranchBudgetExceeded(RuntimeError):
    pass


@dataclass
class SufficiencyVerdict:
    status: str
    witnesses: list = field(default_factory=list)
    branches_explored: int = 0
    horizon: float = 0.0
    tangential_arc_hits: int = 0
    witness_depth: int = 0

    @property
    def sufficient(self) -> bool:
        return self.status == SUFFICIENT


def _corner_data(table: Table, j: int, u: float, px, py):
    """Normals and curvatures of the two sides meeting at the corner."""
    comps = table.components
    p = np.array([px, py])
    sides = []
    for i, c in enumerate(comps):
        if not c.material or c.is_closed:
            continue
        for w in (0.0, c.length):
            if math.hypot(*(c.point(w) - p)) < 1e-9:
                sides.append((c.left_normal(w), c.curvature, i, table.packed[i, OFF] + w))
    return sides[:2]


def corner_branches(table: Table, j: int, u: float, p, v):
    """Outgoing velocities of the two limiting continuations at a corner.

    Branch k reflects off side k first, then alternates between the two sides
    while the velocity still points into the other one.  Returns a list of
    ``(velocity, curved_hits)`` where ``curved_hits`` lists the sides with K > 0
    reflected on.
    """
    sides = _corner_data(table, j, u, *p)
    out = []
    for first in range(len(sides)):
        w = np.asarray(v, dtype=float)
        k = first
        hits = []
        for _ in range(64):
            n, curv, idx, r = sides[k]
            if np.dot(w, n) >= 0.0:
                break
            w = w - 2.0 * np.dot(w, n) * n
            if curv > 0:
                hits.append((idx, r))
            k = 1 - k if len(sides) == 2 else k
        out.append((w, hits))
    return out


def _rect(table):
    return table.rectangle if table.rectangle else (math.inf, math.inf)


def _explore(table: Table, x: FlowPoint, horizon: int, budget: int, t_min: float = 0.0,
             t_max: float = math.inf, strict_budget: bool = False) -> SufficiencyVerdict:
    P = table.packed
    w, h = _rect(table)
    stack = [(x.q[0], x.q[1], x.v[0], x.v[1], 0.0, horizon)]
    branches = 1
    witnesses = []
    tang = 0
    all_witnessed = True
    depth = 0
    while stack:
        qx, qy, vx, vy, t0, left = stack.pop()
        found = None
        while left > 0:
            status, used, dt, qx, qy, vx, vy, j, u, th = K.run_until_witness(
                P, qx, qy, vx, vy, left, w, h)
            tang += th
            left -= used
            if status == 0:
                tw = t0 + dt
                if tw > t_max:
                    break
                if tw > t_min:
                    found = (tw, int(j), float(P[j, OFF] + u))
                    depth = max(depth, horizon - left)
                    break
                t0 = tw
                continue
            if status == 2:
                tc, _, _, _ = K.next_event(P, qx, qy, vx, vy, -1)
                t_hit = t0 + dt + tc
                if t_hit > t_max:
                    break
                px, py = qx + tc * vx, qy + tc * vy
                left -= 1
                conts = corner_branches(table, j, u, (px, py), (vx, vy))
                if len(conts) > 1:
                    branches += len(conts) - 1
                    if branches > budget:
                        if strict_budget:
                            raise BranchBudgetExceeded(f"more than {budget} branches")
                        return SufficiencyVerdict(UNDETERMINED, witnesses, branches, horizon, tang)
                for k, (wv, hits) in enumerate(conts):
                    if hits and t_hit > t_min:
                        idx, r = hits[0]
                        if k == 0:
                            found = (t_hit, idx, r)
                        else:
                            witnesses.append((t_hit, idx, r))
                        continue
                    if k == 0:
                        qx, qy, vx, vy, t0 = px, py, wv[0], wv[1], t_hit
                    else:
                        stack.append((px, py, wv[0], wv[1], t_hit, left))
                if found is not None:
                    depth = max(depth, horizon - left)
                    break
                continue
            break
        if found is None:
            all_witnessed = False
        else:
            witnesses.append(found)
    if all_witnessed:
        return SufficiencyVerdict(SUFFICIENT, witnesses, branches, horizon, tang, depth)
    return SufficiencyVerdict(INSUFFICIENT, witnesses, branches, horizon, tang, depth)


def is_sufficient_segment(table: Table, x: FlowPoint, t_span, budget: int = DEFAULT_BUDGET,
                          max_events: int = 100_000) -> SufficiencyVerdict:
    """Sufficiency of the segment Phi^[a, b](x).

    Raises
    ------
    BranchBudgetExceeded
        More than ``budget`` branches are needed.
    """
    a, b = map(float, t_span)
    if not 0.0 <= a < b < math.inf:
        raise ValueError("need 0 <= a < b < inf")
    v = _explore(table, x, max_events, budget, a, b, strict_budget=True)
    v.horizon = b
    return v


def is_future_sufficient(table: Table, x, horizon_collisions: int,
                         budget: int = DEFAULT_BUDGET) -> SufficiencyVerdict:
    """Truncated future sufficiency: ``sufficient`` if every branch is witnessed
    within ``horizon_collisions`` iterates of T, else ``undetermined``."""
    if horizon_collisions < 1:
        raise ValueError("horizon must be >= 1")
    if isinstance(x, CollisionCoord):
        x = to_flow(table, x)
    v = _explore(table, x, int(horizon_collisions), budget)
    if v.status != SUFFICIENT:
        v.status = UNDETERMINED
    return v


def is_past_sufficient(table: Table, x, horizon_collisions: int,
                       budget: int = DEFAULT_BUDGET) -> SufficiencyVerdict:
    """Past sufficiency, evaluated as future sufficiency of -x."""
    return is_future_sufficient(table, involution(table, x), horizon_collisions, budget)


def sample_curves(table: Table, curves, n: int, rng: np.random.Generator):
    """Points of traced S_1 curves, uniform in (r, phi) arc length.

    Each point is re-evaluated exactly from the shot parameter, so it lies on
    S_1 to machine precision rather than on the polyline chord.
    """
    fams = shot_families(table)
    lens = []
    for cv in curves:
        d = np.diff(cv.polyline, axis=0)
        lens.append(np.hypot(d[:, 0], d[:, 1]))
    per_curve = np.array([l.sum() for l in lens])
    total = per_curve.sum()
    if total <= 0:
        raise NoSingularityCurves("traced curves have zero length")
    s = rng.random(n) * total
    cum = np.concatenate([[0.0], np.cumsum(per_curve)])
    which = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(curves) - 1)
    out = []
    P = table.packed
    for i, c in zip(s - cum[which], which):
        cv = curves[c]
        seg_cum = np.concatenate([[0.0], np.cumsum(lens[c])])
        k = min(np.searchsorted(seg_cum, i, side="right") - 1, len(lens[c]) - 1)
        frac = (i - seg_cum[k]) / lens[c][k] if lens[c][k] > 0 else 0.0
        p = cv.params[k] + frac * (cv.params[k + 1] - cv.params[k])
        j, r, phi = _shot(P, fams[cv.family], p, cv.order)
        if j < 0:
            r, phi = cv.polyline[k] + frac * (cv.polyline[k + 1] - cv.polyline[k])
            j = cv.component
        out.append((int(c), CollisionCoord(int(j), float(r), float(phi), bool(P[j, MAT] == 1))))
    return out


def ansatz_sampler(table: Table, n_samples: int, horizon: int, seed: int,
                   resolution: float = 1e-3, curves=None, budget: int = DEFAULT_BUDGET) -> dict:
    """Fraction of S_1 (arc-length uniform) that is past sufficient within ``horizon``.

    Raises
    ------
    NoSingularityCurves
        The table has an empty S_1.
    """
    if curves is None:
        curves = trace_Sn(table, 1, resolution)
    if not curves:
        raise NoSingularityCurves("S_1 is empty")
    rng = np.random.default_rng(seed)
    pts = sample_curves(table, curves, n_samples, rng)
    per = {}
    n_suff = 0
    tang_flagged = 0
    depths = []
    for c, m in pts:
        v = is_past_sufficient(table, m, horizon, budget)
        d = per.setdefault(c, {"source": curves[c].source, "component": curves[c].component,
                               "n": 0, "sufficient": 0})
        d["n"] += 1
        if v.sufficient:
            d["sufficient"] += 1
            n_suff += 1
            depths.append(v.witness_depth)
        if v.tangential_arc_hits:
            tang_flagged += 1
    depths = np.sort(np.array(depths, dtype=int))
    checkpoints = sorted({1, 2, 5, 10, 20, 50, 100, horizon} & set(range(1, horizon + 1)))
    coverage = {h: float(np.searchsorted(depths, h, side="right") / n_samples) for h in checkpoints}
    return {
        "sufficient_fraction": n_suff / n_samples,
        "undetermined_fraction": 1.0 - n_suff / n_samples,
        "horizon": horizon,
        "n_samples": n_samples,
        "seed": seed,
        "tangential_flagged": tang_flagged,
        "coverage_by_horizon": coverage,
        "per_curve": {str(k): v for k, v in sorted(per.items())},
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
