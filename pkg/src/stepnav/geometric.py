"""Long-horizon geometric planning: A* on the grid, minimizing per-cell CVaR
plus weighted path length, with lethal-risk cells excluded."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from stepnav.errors import InvalidArgumentError, OutOfBoundsError
from stepnav.grid_map import GridMap2p5D
from stepnav.risk import RiskLevel, cvar_gaussian_values

SQRT2 = math.sqrt(2.0)

# 8-connected moves in row-major order (dr, dc, unit length)
_MOVES = [(-1, -1, SQRT2), (-1, 0, 1.0), (-1, 1, SQRT2),
          (0, -1, 1.0), (0, 1, 1.0),
          (1, -1, SQRT2), (1, 0, 1.0), (1, 1, SQRT2)]


@dataclass
class GeomPlanConfig:
    lam: float = 0.05          # traversability-cost per meter of path length
    alpha: float = 0.5
    lethal_threshold: float = 0.9

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError("lambda must be >= 0")
        if self.lethal_threshold <= 0:
            raise InvalidArgumentError("lethal_threshold must be > 0")


@dataclass
class GeometricPath:
    poses: np.ndarray          # (N, 2) world xy, grid-adjacent cell centers
    total_risk: float
    total_length: float

    def to_dict(self):
        return {"poses": [[float(x), float(y)] for x, y in self.poses],
                "total_risk": self.total_risk,
                "total_length": self.total_length}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)


def risk_cost_layer(m: GridMap2p5D, level: RiskLevel) -> np.ndarray:
    """Per-cell CVaR used as traversal cost rho."""
    if m.has_layer("risk_mu") and m.has_layer("risk_sigma"):
        return np.asarray(
            cvar_gaussian_values(m.get_layer("risk_mu"), m.get_layer("risk_sigma"), level))
    if m.has_layer("cvar"):
        return m.get_layer("cvar")
    raise InvalidArgumentError("map has no risk layers (risk_mu/risk_sigma or cvar)")


def path_risk(m: GridMap2p5D, poses, level: RiskLevel) -> float:
    """Dynamic risk metric along a pose sequence.

    The first cell contributes only its mean (the current state is known);
    every later cell contributes its full one-step CVaR.  For Gaussian
    per-cell risk the nested compounding collapses to this sum.
    """
    mu_layer = m.get_layer("risk_mu")
    sigma_layer = m.get_layer("risk_sigma")
    mult = level.tail_multiplier()
    total = 0.0
    for k, (x, y) in enumerate(poses):
        r, c = m.cell_of(x, y)
        mu = mu_layer[r, c]
        sigma = sigma_layer[r, c]
        total += mu if k == 0 else mu + sigma * mult
    return total


def plan_geometric(m: GridMap2p5D, start, goal, cfg: GeomPlanConfig):
    """A* over the 8-connected grid.

    Edge cost entering cell n' is rho(n') + lam * edge_length; cells with
    rho >= lethal_threshold are untraversable.  Heuristic is the Euclidean
    distance to the goal scaled by lam (admissible: every edge costs at
    least lam * length).  Returns a GeometricPath or None when unreachable.
    """
    level = RiskLevel(cfg.alpha)
    rho = risk_cost_layer(m, level)
    if not m.in_extent(*start) or not m.in_extent(*goal):
        raise OutOfBoundsError("start or goal outside map extent")
    sr, sc = m.cell_of(*start)
    gr, gc = m.cell_of(*goal)
    lethal = rho >= cfg.lethal_threshold
    if lethal[sr, sc] or lethal[gr, gc]:
        return None

    H, W = m.height, m.width
    res = m.resolution
    n = H * W
    start_idx = sr * W + sc
    goal_idx = gr * W + gc

    g = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=bool)
    g[start_idx] = 0.0

    def heuristic(idx):
        r, c = divmod(idx, W)
        return cfg.lam * res * math.hypot(r - gr, c - gc)

    open_heap = [(heuristic(start_idx), heuristic(start_idx), start_idx)]
    while open_heap:
        f, h, idx = heapq.heappop(open_heap)
        if closed[idx]:
            continue
        closed[idx] = True
        if idx == goal_idx:
            break
        r, c = divmod(idx, W)
        gi = g[idx]
        for dr, dc, ulen in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < H and 0 <= nc < W):
                continue
            nidx = nr * W + nc
            if closed[nidx] or lethal[nr, nc]:
                continue
            cand = gi + rho[nr, nc] + cfg.lam * ulen * res
            if cand < g[nidx]:
                g[nidx] = cand
                parent[nidx] = idx
                nh = heuristic(nidx)
                heapq.heappush(open_heap, (cand + nh, nh, nidx))

    if not closed[goal_idx]:
        return None

    cells = []
    idx = goal_idx
    while idx >= 0:
        cells.append(idx)
        idx = parent[idx]
    cells.reverse()
    poses = np.array([m.world_of(i // W, i % W) for i in cells])
    length = float(np.sum(np.hypot(*np.diff(poses, axis=0).T))) if len(poses) > 1 else 0.0
    return GeometricPath(poses=poses,
                         total_risk=path_risk(m, poses, level)
                         if m.has_layer("risk_mu") else float(g[goal_idx]),
                         total_length=length)


def dijkstra_cost(m: GridMap2p5D, start, goal, cfg: GeomPlanConfig):
    """Independent uniform-cost search over the identical edge costs.

    Kept separate from plan_geometric on purpose: it is the optimality
    oracle used by the test suite.
    """
    level = RiskLevel(cfg.alpha)
    rho = risk_cost_layer(m, level)
    sr, sc = m.cell_of(*start)
    gr, gc = m.cell_of(*goal)
    lethal = rho >= cfg.lethal_threshold
    if lethal[sr, sc] or lethal[gr, gc]:
        return None
    H, W = m.height, m.width
    res = m.resolution
    dist = {(sr, sc): 0.0}
    heap = [(0.0, (sr, sc))]
    done = set()
    while heap:
        d, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        if cell == (gr, gc):
            return d
        r, c = cell
        for dr, dc, ulen in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < H and 0 <= nc < W) or lethal[nr, nc]:
                continue
            nd = d + rho[nr, nc] + cfg.lam * ulen * res
            if nd < dist.get((nr, nc), np.inf):
                dist[(nr, nc)] = nd
                heapq.heappush(heap, (nd, (nr, nc)))
    return None
