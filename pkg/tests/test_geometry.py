import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semidisperse.geometry import (CornerPoint, NonConvexArc, OpenBoundaryChain,
                                   OverlappingComponents, TableError, TransparentWall,
                                   build_table, curvature_at, describe, load_table,
                                   normal_at, sinai)

from conftest import SINAI_DISK_LEN


def test_unit_square_has_four_corners_and_perimeter_four(square):
    assert len(square.corners) == 4
    assert square.total_boundary_length == pytest.approx(4.0, abs=1e-15)
    assert square.transparent_walls == ()


def test_sinai_torus_has_no_corners_and_four_walls(sinai_table):
    assert len(sinai_table.corners) == 0
    assert sinai_table.material_length == pytest.approx(SINAI_DISK_LEN, rel=1e-15)
    assert len(sinai_table.transparent_walls) == 4
    assert sinai_table.has_curvature


def test_pocket_corners_match_endpoint_coincidences(pocket):
    # brute force: endpoints shared by two different material components
    ends = [(i, tuple(np.round(p, 12))) for i, c in enumerate(pocket.components)
            for p in (c.start, c.end)]
    shared = {p for (i, p), (j, q) in combinations(ends, 2) if i != j and p == q}
    found = {tuple(np.round(c, 12)) for c in pocket.corners}
    assert found == shared
    assert (0.7, 1.0) in found and (1.0, 0.7) in found


def test_normal_examples(square, sinai_table):
    r = sinai_table.nearest_r((0.1, 0.5))
    np.testing.assert_allclose(normal_at(sinai_table, r), [-1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(normal_at(square, 0.5), [0.0, 1.0], atol=1e-15)
    with pytest.raises(CornerPoint) as err:
        normal_at(square, 1.0)
    assert len(err.value.normals) == 2


def test_normal_on_transparent_wall_refuses(sinai_table):
    wall_r = sinai_table.material_length + 0.5
    with pytest.raises(TransparentWall):
        normal_at(sinai_table, wall_r)


def test_curvature_examples(square):
    assert curvature_at(square, 0.25) == 0.0
    assert curvature_at(sinai(0.4), 0.3) == pytest.approx(2.5)
    big = build_table({"ambient": "torus", "rectangle": [3, 3], "components": [
        {"type": "arc", "center": [1.5, 1.5], "radius": 1.0, "from_angle": 0,
         "to_angle": 2 * math.pi}]})
    assert curvature_at(big, 0.1) == pytest.approx(1.0)
    with pytest.raises(CornerPoint):
        curvature_at(square, 2.0)


def test_focusing_arc_rejected():
    # unit square whose top side bulges outward: the arc's centre lies inside Q
    c = (0.5, 0.5)
    rho = math.sqrt(0.5)
    desc = {"ambient": "plane", "components": [
        {"type": "segment", "a": [0, 0], "b": [1, 0]},
        {"type": "segment", "a": [1, 0], "b": [1, 1]},
        {"type": "arc", "center": list(c), "radius": rho,
         "from_angle": math.pi / 4, "to_angle": 3 * math.pi / 4},
        {"type": "segment", "a": [0, 1], "b": [0, 0]},
    ]}
    with pytest.raises(NonConvexArc):
        build_table(desc)


def test_arc_declared_focusing_rejected():
    with pytest.raises(NonConvexArc):
        build_table({"ambient": "torus", "rectangle": [1, 1], "components": [
            {"type": "arc", "center": [0.5, 0.5], "radius": 0.2, "from_angle": 0,
             "to_angle": 2 * math.pi, "convex_inward": False}]})


def test_invalid_tables():
    with pytest.raises(OpenBoundaryChain):
        build_table({"ambient": "plane", "components": [
            {"type": "segment", "a": [0, 0], "b": [1, 0]},
            {"type": "segment", "a": [1, 0], "b": [1, 1]},
            {"type": "segment", "a": [1, 1], "b": [0, 1]}]})
    with pytest.raises(OverlappingComponents):
        sinai(radius=0.6)
    with pytest.raises(OverlappingComponents):
        build_table({"ambient": "torus", "rectangle": [1, 1], "components": [
            {"type": "arc", "center": [0.3, 0.5], "radius": 0.2, "from_angle": 0,
             "to_angle": 2 * math.pi},
            {"type": "arc", "center": [0.6, 0.5], "radius": 0.2, "from_angle": 0,
             "to_angle": 2 * math.pi}]})
    with pytest.raises(TableError):
        build_table({"ambient": "sphere", "components": []})


def test_reference_files_match_builders(tables):
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1] / "tables"
    for name, t in tables.items():
        loaded = load_table(root / f"{name}.tbl")
        np.testing.assert_array_equal(loaded.packed, t.packed)


def test_describe_round_trip(tables):
    for t in tables.values():
        np.testing.assert_allclose(build_table(describe(t)).packed, t.packed, atol=1e-15)


@pytest.mark.parametrize("name", ["square", "sinai", "pocket"])
def test_arc_length_inversion(tables, name, rng):
    t = tables[name]
    L = t.total_boundary_length
    r = rng.random(10_000) * L
    back = np.array([t.nearest_r(t.point_at(x)) for x in r])
    # corners and the r = 0 seam are shared by two parametrisations
    err = np.minimum(np.abs(back - r), L - np.abs(back - r))
    pts = np.array([t.point_at(x) for x in r])
    same = np.array([np.hypot(*(t.point_at(b) - p)) for b, p in zip(back, pts)])
    assert np.all((err < 1e-12 * L) | (same < 1e-12))


@given(st.floats(0.0, 1.0), st.sampled_from(["sinai", "pocket", "square"]))
def test_normal_continuity(tables, u, name):
    t = tables[name]
    mat = [j for j, c in enumerate(t.components) if c.material]
    j = mat[int(u * 997) % len(mat)]
    c = t.components[j]
    off = t.packed[j, 10]
    h = 1e-6 * c.length
    s = off + h + u * (c.length - 3 * h)
    n1, n2 = normal_at(t, s), normal_at(t, s + h)
    angle = math.acos(min(1.0, float(n1 @ n2)))
    assert angle <= c.curvature * h + 1e-9
    assert np.linalg.norm(n1) == pytest.approx(1.0, abs=1e-14)


@given(st.floats(0.02, 0.45), st.floats(0.3, 0.7), st.floats(0.3, 0.7))
def test_torus_disk_lengths(radius, cx, cy):
    if min(cx, cy, 1 - cx, 1 - cy) <= radius:
        with pytest.raises(OverlappingComponents):
            sinai(radius, (cx, cy))
        return
    t = sinai(radius, (cx, cy))
    assert t.material_length == pytest.approx(2 * math.pi * radius, rel=1e-14)
    assert t.total_boundary_length == pytest.approx(2 * math.pi * radius + 4, rel=1e-14)
