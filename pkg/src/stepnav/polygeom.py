"""Convex polygon primitives: obstacle extraction from risk maps, robot
footprints, and signed distance between convex sets.

Signed distance is computed exactly on the Minkowski difference A + (-B):
its convex hull is a polygon, and sd(A, B) is the distance from the origin
to that polygon (negated when the origin is inside).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from stepnav.errors import InvalidArgumentError
from stepnav.grid_map import GridMap2p5D
from stepnav.risk import RiskLevel
from stepnav.geometric import risk_cost_layer

_COLLINEAR_TOL = 1e-9


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW vertices without the closing point."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


@dataclass
class ConvexPolygon:
    vertices: np.ndarray        # (n, 2) CCW world xy

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise InvalidArgumentError("polygon needs >= 3 xy vertices")
        n = len(v)
        if np.any(np.all(np.isclose(v, np.roll(v, -1, axis=0), atol=1e-12), axis=1)):
            raise InvalidArgumentError("polygon has repeated vertices")
        area2 = 0.0
        for i in range(n):
            a, b, c = v[i], v[(i + 1) % n], v[(i + 2) % n]
            turn = _cross(a, b, c)
            if turn < -_COLLINEAR_TOL:
                raise InvalidArgumentError("polygon is not convex/CCW")
            area2 += a[0] * b[1] - b[0] * a[1]
        if area2 <= 0:
            raise InvalidArgumentError("polygon must have positive area (CCW)")
        self.vertices = v

    def translated(self, t) -> "ConvexPolygon":
        return ConvexPolygon(self.vertices + np.asarray(t, dtype=float))

    def contains(self, p, tol=0.0) -> bool:
        v = self.vertices
        n = len(v)
        for i in range(n):
            if _cross(v[i], v[(i + 1) % n], p) < -tol:
                return False
        return True

    def to_dict(self):
        return {"vertices": self.vertices.tolist()}


@dataclass
class FootprintSpec:
    half_length: float = 0.4
    half_width: float = 0.3

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise InvalidArgumentError("footprint half-extents must be > 0")


def rect_vertices(spec: FootprintSpec, s) -> np.ndarray:
    """CCW corner array of the footprint rectangle at pose s, unvalidated."""
    px, py, th = float(s[0]), float(s[1]), float(s[2])
    c, sn = math.cos(th), math.sin(th)
    hl, hw = spec.half_length, spec.half_width
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -sn], [sn, c]])
    return corners @ rot.T + np.array([px, py])


def rect_vertices_batch(spec: FootprintSpec, poses: np.ndarray) -> np.ndarray:
    """(M, 4, 2) footprint corner arrays for (M, >=3) poses, unvalidated."""
    poses = np.asarray(poses, dtype=float)
    c = np.cos(poses[:, 2])
    sn = np.sin(poses[:, 2])
    hl, hw = spec.half_length, spec.half_width
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.empty((len(poses), 2, 2))
    rot[:, 0, 0] = c
    rot[:, 0, 1] = -sn
    rot[:, 1, 0] = sn
    rot[:, 1, 1] = c
    return np.einsum("vj,mij->mvi", corners, rot) + poses[:, None, :2]


def footprint_at(spec: FootprintSpec, s) -> ConvexPolygon:
    """Rectangle footprint at pose s = (p_x, p_y, p_theta), CCW."""
    return ConvexPolygon(rect_vertices(spec, s))


def decompose_risk_obstacles(m: GridMap2p5D, level: RiskLevel, rho_max: float,
                             roi=None, rho=None) -> list:
    """Axis-aligned rectangles exactly covering cells with cvar >= rho_max.

    Greedy: merge horizontal runs per row, then stack vertically-adjacent
    runs with identical column spans.  Rectangles are pairwise disjoint and
    their rasterized union equals the lethal cell set.  A precomputed risk
    cost layer can be passed to skip recomputation.
    """
    if rho is None:
        rho = risk_cost_layer(m, level)
    lethal = rho >= rho_max
    if roi is not None:
        (x0, y0), (x1, y1) = roi
        cols = m.origin[0] + m.resolution * np.arange(m.width)
        rows = m.origin[1] + m.resolution * np.arange(m.height)
        half = 0.5 * m.resolution
        in_roi = ((cols[None, :] + half > x0) & (cols[None, :] - half < x1)
                  & (rows[:, None] + half > y0) & (rows[:, None] - half < y1))
        lethal = lethal & in_roi

    # row runs: (row, col_start, col_end_inclusive)
    runs_by_row = []
    for r in range(m.height):
        row = lethal[r]
        runs = []
        c = 0
        while c < m.width:
            if row[c]:
                c0 = c
                while c + 1 < m.width and row[c + 1]:
                    c += 1
                runs.append((c0, c))
            c += 1
        runs_by_row.append(runs)

    rects = []  # (r0, r1, c0, c1) inclusive cell ranges
    open_rects = {}  # (c0, c1) -> r0 for runs still growing
    for r in range(m.height + 1):
        runs = set(runs_by_row[r]) if r < m.height else set()
        closed = [span for span in open_rects if span not in runs]
        for span in closed:
            rects.append((open_rects.pop(span), r - 1, span[0], span[1]))
        for span in runs:
            open_rects.setdefault(span, r)

    half = 0.5 * m.resolution
    polys = []
    for r0, r1, c0, c1 in sorted(rects):
        x0, y0 = m.world_of(r0, c0)
        x1, y1 = m.world_of(r1, c1)
        # CCW by construction; skip the ConvexPolygon validation pass
        poly = object.__new__(ConvexPolygon)
        poly.vertices = np.array([
            [x0 - half, y0 - half], [x1 + half, y0 - half],
            [x1 + half, y1 + half], [x0 - half, y1 + half]])
        polys.append(poly)
    return polys


def _points_edges_distance(pts: np.ndarray, verts: np.ndarray) -> float:
    """Minimum distance from any of pts to the edges of a closed polygon."""
    a = verts
    ab = np.roll(verts, -1, axis=0) - verts
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pej,ej->pe", ap, ab) / denom[None, :], 0.0, 1.0)
    d = ap - t[:, :, None] * ab[None, :, :]
    return float(np.sqrt(np.min(np.einsum("pej,pej->pe", d, d))))


def signed_distance_vertices(va: np.ndarray, vb: np.ndarray) -> float:
    """Signed distance between convex CCW vertex arrays (no validation).

    Overlap and penetration depth follow from the separating-axis theorem:
    the minimum translation direction of two convex polygons is an edge
    normal of one of them.  When disjoint, the distance is attained at a
    vertex of one polygon and an edge of the other.
    """
    ea = np.roll(va, -1, axis=0) - va
    eb = np.roll(vb, -1, axis=0) - vb
    axes = np.concatenate([
        np.stack([-ea[:, 1], ea[:, 0]], axis=1),
        np.stack([-eb[:, 1], eb[:, 0]], axis=1)])
    norms = np.hypot(axes[:, 0], axes[:, 1])
    axes = axes[norms > 1e-300] / norms[norms > 1e-300, None]
    pa = va @ axes.T
    pb = vb @ axes.T
    # translation needed to separate along each axis; intervals are disjoint
    # exactly when this is <= 0 on some axis
    depth = np.minimum(pa.max(axis=0) - pb.min(axis=0),
                       pb.max(axis=0) - pa.min(axis=0))
    if np.all(depth > 0.0):
        return -float(np.min(depth))
    return min(_points_edges_distance(va, vb), _points_edges_distance(vb, va))


def signed_distance_batch(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Vectorized signed_distance_vertices for (M, na, 2) vs (M, nb, 2)
    stacks of convex vertex arrays (same vertex counts within each stack)."""
    ea = np.roll(va, -1, axis=1) - va
    eb = np.roll(vb, -1, axis=1) - vb
    axes = np.concatenate([
        np.stack([-ea[..., 1], ea[..., 0]], axis=-1),
        np.stack([-eb[..., 1], eb[..., 0]], axis=-1)], axis=1)
    norms = np.maximum(np.hypot(axes[..., 0], axes[..., 1]), 1e-300)
    axes = axes / norms[..., None]
    pa = np.einsum("mvj,maj->mva", va, axes)
    pb = np.einsum("mvj,maj->mva", vb, axes)
    depth = np.minimum(pa.max(axis=1) - pb.min(axis=1),
                       pb.max(axis=1) - pa.min(axis=1))
    depth_min = depth.min(axis=1)
    overlapping = np.all(depth > 0.0, axis=1)

    def pts_edges(pts, verts, edges):
        denom = np.maximum(np.einsum("mej,mej->me", edges, edges), 1e-300)
        ap = pts[:, :, None, :] - verts[:, None, :, :]
        t = np.einsum("mpej,mej->mpe", ap, edges) / denom[:, None, :]
        d = ap - np.clip(t, 0.0, 1.0)[..., None] * edges[:, None, :, :]
        return np.sqrt(np.einsum("mpej,mpej->mpe", d, d).min(axis=(1, 2)))

    dist = np.minimum(pts_edges(va, vb, eb), pts_edges(vb, va, ea))
    return np.where(overlapping, -depth_min, dist)


def signed_distance(A: ConvexPolygon, B: ConvexPolygon) -> float:
    """Separation distance when disjoint, minus penetration depth when
    overlapping; zero when touching."""
    return signed_distance_vertices(A.vertices, B.vertices)


def signed_distance_pose(spec: FootprintSpec, s, B: ConvexPolygon) -> float:
    return signed_distance_vertices(rect_vertices(spec, s), B.vertices)


def signed_distance_gradient(spec: FootprintSpec, s, B: ConvexPolygon,
                             h_xy: float = 1e-4, h_theta: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of sd w.r.t. pose (p_x, p_y, p_theta)."""
    s = np.asarray(s, dtype=float)
    grad = np.empty(3)
    steps = (h_xy, h_xy, h_theta)
    for i in range(3):
        sp = s.copy()
        sm = s.copy()
        sp[i] += steps[i]
        sm[i] -= steps[i]
        grad[i] = (signed_distance_pose(spec, sp, B)
                   - signed_distance_pose(spec, sm, B)) / (2 * steps[i])
    return grad
