import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stepnav.errors import InvalidArgumentError
from stepnav.geometric import risk_cost_layer
from stepnav.grid_map import create_map
from stepnav.polygeom import (ConvexPolygon, FootprintSpec, convex_hull,
                              decompose_risk_obstacles, footprint_at,
                              rect_vertices, rect_vertices_batch,
                              signed_distance, signed_distance_batch,
                              signed_distance_gradient, signed_distance_pose,
                              signed_distance_vertices)
from stepnav.risk import RiskLevel

# Frozen oracle values: distance from the origin to the convex hull of the
# Minkowski difference A + (-B), computed with an independent scipy
# ConvexHull implementation.
TRI = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.5]])
QUAD = np.array([[3.0, 0.5], [4.0, 0.2], [4.5, 1.4], [3.2, 1.6]])
PENT = np.array([[1.0, 0.5], [2.5, 0.3], [3.0, 1.5], [2.0, 2.4], [0.8, 1.8]])
HULL_ORACLE = [
    (TRI, QUAD, 1.118033988749895),
    (TRI, PENT, -0.5547001962252291),
    (QUAD, PENT, 0.17888543819998332),
]


def square(cx, cy, half=0.5):
    return ConvexPolygon(np.array([
        [cx - half, cy - half], [cx + half, cy - half],
        [cx + half, cy + half], [cx - half, cy + half]]))


def random_convex(rng, scale=1.0, offset=(0.0, 0.0)):
    pts = rng.uniform(-scale, scale, (rng.integers(3, 9), 2)) + offset
    hull = convex_hull(pts)
    if len(hull) < 3:
        return None
    return ConvexPolygon(hull)


def overlap_oracle(A, B, n=400):
    """Point-containment sampling: do the interiors intersect?"""
    lo = np.maximum(A.vertices.min(axis=0), B.vertices.min(axis=0))
    hi = np.minimum(A.vertices.max(axis=0), B.vertices.max(axis=0))
    if np.any(lo >= hi):
        return False
    rng = np.random.default_rng(12345)
    pts = rng.uniform(lo, hi, (n, 2))
    return any(A.contains(p, tol=-1e-12) and B.contains(p, tol=-1e-12)
               for p in pts)


class TestPolygonValidation:
    def test_rejects_degenerate(self):
        with pytest.raises(InvalidArgumentError):
            ConvexPolygon(np.array([[0, 0], [1, 0]]))
        with pytest.raises(InvalidArgumentError):
            ConvexPolygon(np.array([[0, 0], [1, 0], [1, 0]]))
        # clockwise
        with pytest.raises(InvalidArgumentError):
            ConvexPolygon(np.array([[0, 0], [0, 1], [1, 0]]))
        # non-convex
        with pytest.raises(InvalidArgumentError):
            ConvexPolygon(np.array([[0, 0], [2, 0], [0.2, 0.2], [0, 2]]))

    def test_contains(self):
        sq = square(0, 0)
        assert sq.contains((0.0, 0.0))
        assert sq.contains((0.5, 0.5))
        assert not sq.contains((0.6, 0.0))


class TestFootprint:
    def test_spec_validation(self):
        with pytest.raises(InvalidArgumentError):
            FootprintSpec(half_length=0.0)

    def test_rectangle_at_pose(self):
        spec = FootprintSpec(half_length=0.4, half_width=0.3)
        poly = footprint_at(spec, (1.0, 2.0, 0.0))
        assert np.allclose(sorted(poly.vertices[:, 0]), [0.6, 0.6, 1.4, 1.4])
        # rotation by 90 degrees swaps extents
        poly90 = footprint_at(spec, (0.0, 0.0, math.pi / 2))
        assert np.allclose(np.abs(poly90.vertices[:, 0]).max(), 0.3)
        assert np.allclose(np.abs(poly90.vertices[:, 1]).max(), 0.4)

    def test_batch_matches_scalar(self):
        spec = FootprintSpec()
        rng = np.random.default_rng(0)
        poses = rng.uniform(-3, 3, (20, 3))
        batch = rect_vertices_batch(spec, poses)
        for i, s in enumerate(poses):
            np.testing.assert_allclose(batch[i], rect_vertices(spec, s),
                                       atol=1e-14)


class TestSignedDistance:
    def test_axis_aligned_exact(self):
        # gap of exactly 1 -> sd = 1; overlap by 1 on the short axis -> sd = -1
        assert abs(signed_distance(square(0, 0), square(2, 0)) - 1.0) < 1e-6
        # identical 2x2 squares: penetration depth equals the side length
        assert abs(signed_distance(square(0, 0, 1.0), square(0, 0, 1.0)) + 2.0) < 1e-6
        # 2x2 squares overlapping by half: depth 1
        assert abs(signed_distance(square(0, 0, 1.0), square(1.0, 0, 1.0)) + 1.0) < 1e-6

    def test_touching_is_zero(self):
        assert abs(signed_distance(square(0, 0), square(1.0, 0))) < 1e-9

    def test_containment_depth(self):
        # small square strictly inside a big one: minimal separating
        # translation pushes it out through the nearest face.  x axis:
        # min(2 - 0, 1 - (-2)) = 2; y axis: min(2.5, 2.5) = 2.5 -> depth 2.
        big = square(0, 0, half=2.0)
        small = square(0.5, 0, half=0.5)
        assert abs(signed_distance(big, small) + 2.0) < 1e-9

    def test_matches_frozen_hull_oracle(self):
        for va, vb, want in HULL_ORACLE:
            assert abs(signed_distance_vertices(va, vb) - want) < 1e-9

    def test_sign_against_sampling_oracle(self):
        rng = np.random.default_rng(77)
        checked = 0
        while checked < 200:
            A = random_convex(rng, 1.0, rng.uniform(-2, 2, 2))
            B = random_convex(rng, 1.0, rng.uniform(-2, 2, 2))
            if A is None or B is None:
                continue
            sd = signed_distance(A, B)
            if abs(sd) < 1e-3:
                continue  # sampling oracle unreliable at near-touching
            assert (sd < 0) == overlap_oracle(A, B), (A.vertices, B.vertices)
            checked += 1

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(-5, 5), st.floats(-5, 5))
    def test_symmetry_and_translation_invariance(self, seed, tx, ty):
        rng = np.random.default_rng(seed)
        A = random_convex(rng, 1.0, (0.0, 0.0))
        B = random_convex(rng, 1.0, rng.uniform(-2.5, 2.5, 2))
        if A is None or B is None:
            return
        sd = signed_distance(A, B)
        assert abs(sd - signed_distance(B, A)) < 1e-9
        t = np.array([tx, ty])
        assert abs(signed_distance(A.translated(t), B.translated(t)) - sd) < 1e-9

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        spec = FootprintSpec()
        poses = rng.uniform(0, 4, (30, 3))
        va = rect_vertices_batch(spec, poses)
        quad = rng.uniform(1, 3, (4, 2))
        hull = convex_hull(quad)
        while len(hull) < 3:
            quad = rng.uniform(1, 3, (4, 2))
            hull = convex_hull(quad)
        vb = np.broadcast_to(hull[:len(hull)], (30, len(hull), 2))
        got = signed_distance_batch(va, np.ascontiguousarray(vb))
        for i in range(30):
            assert abs(got[i] - signed_distance_vertices(va[i], hull)) < 1e-12


class TestGradient:
    def test_gap_along_x(self):
        # obstacle to the right: moving +x decreases sd
        spec = FootprintSpec(half_length=0.4, half_width=0.3)
        obs = square(3.0, 0.0)
        g = signed_distance_gradient(spec, (0.0, 0.0, 0.0), obs)
        assert g[0] < -0.99
        assert abs(g[1]) < 1e-6  # symmetric configuration
        assert abs(g[2]) < 0.5

    def test_richardson_self_check(self):
        # halved-step gradient agrees within 5% where sd is smooth
        rng = np.random.default_rng(11)
        spec = FootprintSpec()
        obs = square(2.0, 1.0, half=0.7)
        checked = 0
        for _ in range(50):
            s = rng.uniform(-1, 1, 3)
            g1 = signed_distance_gradient(spec, s, obs, h_xy=1e-4, h_theta=1e-4)
            g2 = signed_distance_gradient(spec, s, obs, h_xy=5e-5, h_theta=5e-5)
            denom = max(np.linalg.norm(g1), 1e-6)
            if np.linalg.norm(g1 - g2) / denom < 0.05:
                checked += 1
        assert checked >= 45  # a few corner configurations may be kinked

    def test_matches_pose_distance(self):
        spec = FootprintSpec()
        obs = square(2.0, 0.0)
        sd = signed_distance_pose(spec, (0.0, 0.0, 0.0), obs)
        assert abs(sd - (2.0 - 0.5 - spec.half_length)) < 1e-9


class TestDecomposition:
    def make_map(self, mu):
        n = mu.shape[0]
        m = create_map(n, n, 0.5, (0.0, 0.0))
        m.add_layer("risk_mu", mu)
        m.add_layer("risk_sigma", np.zeros_like(mu))
        return m

    def rasterize(self, m, polys):
        hit = np.zeros((m.height, m.width), dtype=bool)
        for poly in polys:
            for r in range(m.height):
                for c in range(m.width):
                    if poly.contains(m.world_of(r, c), tol=1e-9):
                        hit[r, c] = True
        return hit

    def test_union_equals_lethal_set(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mu = (rng.uniform(0, 1, (12, 12)) > 0.7).astype(float)
            m = self.make_map(mu)
            polys = decompose_risk_obstacles(m, RiskLevel(0.5), 0.9)
            lethal = risk_cost_layer(m, RiskLevel(0.5)) >= 0.9
            np.testing.assert_array_equal(self.rasterize(m, polys), lethal)

    def test_rectangles_disjoint(self):
        mu = np.zeros((10, 10))
        mu[2:5, 2:8] = 1.0
        mu[6:9, 4:6] = 1.0
        m = self.make_map(mu)
        polys = decompose_risk_obstacles(m, RiskLevel(0.5), 0.9)
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                assert signed_distance(polys[i], polys[j]) > -1e-9

    def test_roi_filters(self):
        mu = np.zeros((10, 10))
        mu[1, 1] = 1.0
        mu[8, 8] = 1.0
        m = self.make_map(mu)
        polys = decompose_risk_obstacles(m, RiskLevel(0.5), 0.9,
                                         roi=((0.0, 0.0), (2.0, 2.0)))
        assert len(polys) == 1
        assert polys[0].contains(m.world_of(1, 1))


def test_convex_hull_known_square():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5], [0.2, 0.8]])
    hull = convex_hull(pts)
    assert len(hull) == 4
    assert {tuple(v) for v in hull} == {(0, 0), (1, 0), (1, 1), (0, 1)}
