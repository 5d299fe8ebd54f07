"""Risk-aware kinodynamic SQP-MPC.

One replan cycle: shift the previous solution forward, pick the best initial
guess from a trajectory library, linearize costs and constraints about it,
solve the resulting sparse QP, linesearch the control correction, and re-roll.
Falls back to an emergency stopping sequence when every candidate collides.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from stepnav.errors import ConfigurationError, InvalidArgumentError, OutOfBoundsError
from stepnav.dynamics import (DIFF_DRIVE, DynamicsModel, Trajectory, linearize,
                              rollout, rollout_batch, step, wrap_angle)
from stepnav.geometric import GeometricPath, risk_cost_layer
from stepnav.grid_map import GridMap2p5D, normal_jacobian_many, \
    sample_bilinear_many, sample_normal
from stepnav.polygeom import (ConvexPolygon, FootprintSpec, decompose_risk_obstacles,
                              rect_vertices, rect_vertices_batch,
                              signed_distance_batch)
from stepnav.qp import QpProblem, QpSettings, solve_qp
from stepnav.risk import RISK_CAP, RiskLevel


@dataclass
class LibraryConfig:
    n_random: int = 6
    perturb_std: tuple = (0.4, 0.4)
    arc_rates: tuple = (-0.8, -0.4, 0.4, 0.8)
    include_turns: bool = True


@dataclass
class LinesearchConfig:
    gamma_init: float = 1.0
    gamma_min: float = 0.015625
    gamma_max: float = 1.0
    max_iter: int = 8


@dataclass
class MpcConfig:
    T: int = 20
    dt: float = 0.2
    q_weights: tuple = (2.0, 2.0, 0.2, 0.1)
    lam: float = 1.0
    alpha: float = 0.5
    rho_max: float = 0.9
    gamma_v: float = 1.0
    gamma_theta: float = 1.0
    v_floor_frac: float = 0.2
    literal_velocity_risk: bool = False
    omega_max: tuple = (0.5, 0.5)
    eps_x: float = 0.5
    eps_u: float = 1.0
    lambda_eps: float = 100.0
    qp_iterations: int = 3
    sd_activation: float = 3.0
    slack_tol: float = 1e-3
    v_ref: float = 1.0
    footprint: FootprintSpec = field(default_factory=FootprintSpec)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    linesearch: LinesearchConfig = field(default_factory=LinesearchConfig)
    qp_settings: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        if self.T < 1:
            raise InvalidArgumentError("horizon T must be >= 1")
        if self.qp_iterations < 1:
            raise InvalidArgumentError("qp_iterations must be >= 1")
        if self.eps_x <= 0 or self.eps_u <= 0:
            raise InvalidArgumentError("box radii must be > 0")
        if min(self.q_weights) < 0 or self.lam < 0 or self.lambda_eps < 0:
            raise InvalidArgumentError("weights must be >= 0")

    def risk_level(self) -> RiskLevel:
        return RiskLevel(self.alpha)


@dataclass
class CandidateSet:
    entries: list  # [(Trajectory, cost, collision_count)] sorted by cost

    def best(self):
        """Lowest cost among collision-free candidates; if all collide,
        lowest collision count, then lowest cost."""
        clean = [e for e in self.entries if e[2] == 0]
        if clean:
            return clean[0]
        return min(self.entries, key=lambda e: (e[2], e[1]))

    def all_colliding(self) -> bool:
        return all(e[2] > 0 for e in self.entries)


@dataclass
class ReplanStats:
    iterations: int = 0
    gamma: float = 1.0
    qp_primal_residual: float = float("nan")
    qp_dual_residual: float = float("nan")
    wall_time: float = 0.0


@dataclass
class ReplanResult:
    trajectory: Trajectory
    feasible: bool
    alpha_used: float
    stats: ReplanStats = field(default_factory=ReplanStats)


# --- risk field sampling -------------------------------------------------

class RiskField:
    """Clamped, vectorized access to the cvar cost layer of a map."""

    def __init__(self, m: GridMap2p5D, level: RiskLevel):
        self.map = m
        self.rho_raw = risk_cost_layer(m, level)
        self.rho = np.nan_to_num(self.rho_raw, nan=RISK_CAP)
        self._lo = (m.origin[0], m.origin[1])
        self._hi = (m.origin[0] + m.resolution * (m.width - 1),
                    m.origin[1] + m.resolution * (m.height - 1))
        self._tmp = GridMap2p5D(m.resolution, m.origin, m.width, m.height,
                                {"rho": self.rho})

    def clamp(self, xs, ys):
        return (np.clip(xs, self._lo[0], self._hi[0]),
                np.clip(ys, self._lo[1], self._hi[1]))

    def sample(self, xs, ys):
        cx, cy = self.clamp(xs, ys)
        return sample_bilinear_many(self._tmp, "rho", cx, cy)

    def off_map(self, xs, ys):
        return ~np.vectorize(self.map.in_extent)(xs, ys) if np.ndim(xs) else \
            not self.map.in_extent(xs, ys)


def cvar_cost_derivatives(m: GridMap2p5D, x, cfg: MpcConfig):
    """Gradient (3,) and PSD Hessian (3,3) of the cvar field w.r.t.
    (p_x, p_y, p_theta) by central differences with step resolution/4."""
    field_ = RiskField(m, cfg.risk_level())
    if not m.in_extent(x[0], x[1]):
        raise OutOfBoundsError(f"state position {x[:2]} outside map")
    g, H = _risk_expansion(field_, np.asarray([[x[0], x[1]]]), m.resolution / 4.0)
    return g[0], H[0]


def _risk_expansion(field_: RiskField, positions, h):
    """Batch gradient/Hessian of the risk field at (N, 2) positions.

    Returns g (N, 3) and PSD H (N, 3, 3); the yaw components are zero since
    the position-only field does not depend on heading.
    """
    px = positions[:, 0]
    py = positions[:, 1]
    offs = np.array([
        [0, 0], [h, 0], [-h, 0], [0, h], [0, -h],
        [h, h], [h, -h], [-h, h], [-h, -h]])
    xs = px[:, None] + offs[None, :, 0]
    ys = py[:, None] + offs[None, :, 1]
    v = field_.sample(xs.ravel(), ys.ravel()).reshape(len(px), len(offs))
    c, pxp, pxm, pyp, pym, pp, pm, mp, mm = (v[:, i] for i in range(9))
    g = np.zeros((len(px), 3))
    g[:, 0] = (pxp - pxm) / (2 * h)
    g[:, 1] = (pyp - pym) / (2 * h)
    H = np.zeros((len(px), 3, 3))
    H[:, 0, 0] = (pxp - 2 * c + pxm) / h ** 2
    H[:, 1, 1] = (pyp - 2 * c + pym) / h ** 2
    hxy = (pp - pm - mp + mm) / (4 * h ** 2)
    H[:, 0, 1] = hxy
    H[:, 1, 0] = hxy
    # eigenvalue floor at zero on the 2x2 position block
    block = H[:, :2, :2]
    w, V = np.linalg.eigh(block)
    w = np.clip(w, 0.0, None)
    H[:, :2, :2] = V @ (w[:, :, None] * np.swapaxes(V, 1, 2))
    return g, H


# --- orientation constraint ----------------------------------------------

_G_ROWS = None  # docs: see orientation_constraint


def orientation_constraint(m: GridMap2p5D, s):
    """Pitch/roll omega(s) = g(R_theta n^w) and its 2x3 Jacobian w.r.t.
    (p_x, p_y, p_theta), via the analytic chain rule with a numeric normal
    Jacobian from the elevation layers."""
    omega, J = orientation_constraints_many(
        m, np.asarray([[s[0], s[1], s[2]]], dtype=float))
    return omega[0], J[0]


def orientation_constraints_many(m: GridMap2p5D, poses: np.ndarray):
    """Batched orientation_constraint: (K, 2) omegas and (K, 2, 3) Jacobians
    for a (K, >=3) array of poses."""
    px = poses[:, 0]
    py = poses[:, 1]
    th = poses[:, 2]
    K = len(poses)
    nw = sample_normal(m, px, py)                  # (K, 3)
    dn_dp = normal_jacobian_many(m, px, py)        # (K, 3, 2)
    c, sn = np.cos(th), np.sin(th)
    zero = np.zeros(K)
    one = np.ones(K)
    R = np.stack([
        np.stack([c, sn, zero], axis=-1),
        np.stack([-sn, c, zero], axis=-1),
        np.stack([zero, zero, one], axis=-1)], axis=1)        # (K, 3, 3)
    dR = np.stack([
        np.stack([-sn, c, zero], axis=-1),
        np.stack([-c, -sn, zero], axis=-1),
        np.stack([zero, zero, zero], axis=-1)], axis=1)
    nan = np.any(np.isnan(nw), axis=1)
    nw = np.where(nan[:, None], [0.0, 0.0, 1.0], nw)
    nr = np.einsum("kij,kj->ki", R, nw)
    omega = np.stack([np.arctan2(nr[:, 0], nr[:, 2]),
                      -np.arctan2(nr[:, 1], nr[:, 2])], axis=-1)
    d_xz = nr[:, 0] ** 2 + nr[:, 2] ** 2
    d_yz = nr[:, 1] ** 2 + nr[:, 2] ** 2
    degen = nan | (d_xz < 1e-12) | (d_yz < 1e-12)
    d_xz = np.where(degen, 1.0, d_xz)
    d_yz = np.where(degen, 1.0, d_yz)
    G = np.zeros((K, 2, 3))
    G[:, 0, 0] = nr[:, 2] / d_xz
    G[:, 0, 2] = -nr[:, 0] / d_xz
    G[:, 1, 1] = -nr[:, 2] / d_yz
    G[:, 1, 2] = nr[:, 1] / d_yz
    J = np.empty((K, 2, 3))
    J[:, :, :2] = np.einsum("kij,kjl,klm->kim", G, R, dn_dp)
    J[:, :, 2] = np.einsum("kij,kjl,kl->ki", G, dR, nw)
    omega = np.where(nan[:, None], 0.0, omega)
    J[degen] = 0.0
    return omega, J


# --- collision utilities --------------------------------------------------

def _poly_radius(poly: ConvexPolygon):
    c = poly.vertices.mean(axis=0)
    return c, float(np.max(np.hypot(*(poly.vertices - c).T)))


def _sat_overlap(A: np.ndarray, B: np.ndarray) -> bool:
    """Separating-axis overlap test for convex CCW vertex arrays."""
    for poly, other in ((A, B), (B, A)):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        pa = poly @ normals.T
        pb = other @ normals.T
        if np.any(pa.max(axis=0) < pb.min(axis=0)) or \
                np.any(pb.max(axis=0) < pa.min(axis=0)):
            return False
    return True


def _sat_overlap_batch(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Vectorized _sat_overlap for (M, na, 2) vs (M, nb, 2) stacks."""
    ea = np.roll(va, -1, axis=1) - va
    eb = np.roll(vb, -1, axis=1) - vb
    axes = np.concatenate([
        np.stack([-ea[..., 1], ea[..., 0]], axis=-1),
        np.stack([-eb[..., 1], eb[..., 0]], axis=-1)], axis=1)
    pa = np.einsum("mvj,maj->mva", va, axes)
    pb = np.einsum("mvj,maj->mva", vb, axes)
    separated = (pa.max(axis=1) < pb.min(axis=1)) | \
        (pb.max(axis=1) < pa.min(axis=1))
    return ~np.any(separated, axis=1)


class ObstacleSet:
    def __init__(self, polygons):
        self.polygons = list(polygons)
        if self.polygons:
            cr = [_poly_radius(p) for p in self.polygons]
            self.centers = np.array([c for c, _ in cr])
            self.radii = np.array([r for _, r in cr])
        else:
            self.centers = np.zeros((0, 2))
            self.radii = np.zeros(0)
        # vertices stacked per vertex count for batched geometry queries
        self._nverts = np.array([len(p.vertices) for p in self.polygons],
                                dtype=np.intp)
        self._group_pos = np.zeros(len(self.polygons), dtype=np.intp)
        self._groups = {}
        for nv in np.unique(self._nverts):
            idx = np.nonzero(self._nverts == nv)[0]
            self._groups[int(nv)] = (idx, np.stack(
                [self.polygons[j].vertices for j in idx]))
            self._group_pos[idx] = np.arange(len(idx))

    def __len__(self):
        return len(self.polygons)

    def near_indices(self, point, reach):
        if not self.polygons:
            return ()
        d = np.hypot(*(self.centers - np.asarray(point[:2])).T)
        return np.nonzero(d <= reach + self.radii)[0]

    def stacked_vertices(self, indices) -> list:
        """[(sub_indices, (len(sub), nv, 2) vertex stack)] grouped by
        vertex count, preserving batch order within each group."""
        indices = np.asarray(indices, dtype=np.intp)
        out = []
        for nv, (_, verts) in self._groups.items():
            sel = np.nonzero(self._nverts[indices] == nv)[0]
            if len(sel):
                out.append((sel, verts[self._group_pos[indices[sel]]]))
        return out

    def collision_counts(self, states_batch, spec: FootprintSpec):
        """Number of in-collision steps for each candidate in a batch of
        state rollouts (N, T+1, nx)."""
        N, K = states_batch.shape[0], states_batch.shape[1]
        counts = np.zeros(N, dtype=int)
        if not self.polygons:
            return counts
        fp_rad = math.hypot(spec.half_length, spec.half_width)
        pos = states_batch[:, :, :2].reshape(-1, 2)
        d = np.hypot(pos[:, None, 0] - self.centers[None, :, 0],
                     pos[:, None, 1] - self.centers[None, :, 1])
        pi, pj = np.nonzero(d <= fp_rad + self.radii[None, :])
        if not len(pi):
            return counts
        va = rect_vertices_batch(spec, states_batch.reshape(N * K, -1)[pi])
        hit = np.zeros(len(pi), dtype=bool)
        for sel, vb in self.stacked_vertices(pj):
            hit[sel] = _sat_overlap_batch(va[sel], vb)
        pose_hit = np.zeros(N * K, dtype=bool)
        np.logical_or.at(pose_hit, pi, hit)
        return pose_hit.reshape(N, K).sum(axis=1)


def extract_obstacles(m: GridMap2p5D, cfg: MpcConfig, around=None,
                      field_: RiskField | None = None) -> ObstacleSet:
    roi = None
    if around is not None:
        reach = cfg.T * cfg.dt * 2.0 + cfg.sd_activation
        roi = ((around[0] - reach, around[1] - reach),
               (around[0] + reach, around[1] + reach))
    rho = field_.rho_raw if field_ is not None else None
    polys = decompose_risk_obstacles(m, cfg.risk_level(), cfg.rho_max, roi, rho=rho)
    return ObstacleSet(polys)


# --- cost evaluation -------------------------------------------------------

def _tracking_reference(path: GeometricPath, x0, model: DynamicsModel,
                        cfg: MpcConfig) -> np.ndarray:
    """Resample the geometric path by arc length into (T+1, nx) reference
    states starting from the projection of x0 onto the path."""
    pts = np.asarray(path.poses, dtype=float)
    if len(pts) == 0:
        raise InvalidArgumentError("reference path is empty")
    if len(pts) == 1:
        pts = np.vstack([pts, pts[0] + 1e-9])
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    p0 = np.asarray(x0[:2])
    # projection of the current position onto the polyline
    t = np.einsum("ij,ij->i", p0 - pts[:-1], seg) / np.maximum(seg_len ** 2, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    proj = pts[:-1] + t[:, None] * seg
    dist = np.hypot(*(proj - p0).T)
    j = int(np.argmin(dist))
    s0 = cum[j] + t[j] * seg_len[j]

    targets = s0 + cfg.v_ref * model.dt * np.arange(cfg.T + 1)
    s_end = cum[-1]
    targets = np.clip(targets, 0.0, s_end)
    xs = np.interp(targets, cum, pts[:, 0])
    ys = np.interp(targets, cum, pts[:, 1])
    ref = np.zeros((cfg.T + 1, model.nx))
    ref[:, 0] = xs
    ref[:, 1] = ys
    dx = np.gradient(xs) if len(xs) > 1 else np.zeros(1)
    dy = np.gradient(ys) if len(ys) > 1 else np.zeros(1)
    heading = np.arctan2(dy, dx)
    still = (np.abs(dx) + np.abs(dy)) < 1e-12
    heading[still] = x0[2]
    ref[:, 2] = heading
    ref[:, 3] = np.where(targets < s_end - 1e-9, cfg.v_ref, 0.0)
    return ref


def trajectory_cost(states, ref_states, field_: RiskField, cfg: MpcConfig,
                    mu_field: RiskField | None = None) -> float:
    """Nonlinear objective: tracking quadratic plus lam * path CVaR.

    The first step contributes only its risk mean when a mean field is
    provided (the current cell is already known); later steps contribute
    the full one-step CVaR.
    """
    Q = np.asarray(cfg.q_weights[:states.shape[1]])
    err = states - ref_states
    err[:, 2] = np.arctan2(np.sin(err[:, 2]), np.cos(err[:, 2]))
    track = float(np.sum(err ** 2 @ Q))
    xs, ys = states[:, 0], states[:, 1]
    risk = field_.sample(xs, ys)
    if mu_field is not None and len(risk):
        risk = risk.copy()
        risk[0] = mu_field.sample(xs[0], ys[0])
    # leaving the mapped area is treated as maximal risk
    off = (xs < field_._lo[0]) | (xs > field_._hi[0]) | \
          (ys < field_._lo[1]) | (ys > field_._hi[1])
    risk = np.where(off, RISK_CAP * 4.0, risk)
    return track + cfg.lam * float(np.sum(risk))


def _batch_costs(states_batch, ref_states, field_: RiskField, cfg: MpcConfig):
    N, K, nx = states_batch.shape
    Q = np.asarray(cfg.q_weights[:nx])
    err = states_batch - ref_states[None, :, :]
    err[:, :, 2] = np.arctan2(np.sin(err[:, :, 2]), np.cos(err[:, :, 2]))
    track = np.einsum("nkj,j->n", err ** 2, Q)
    xs = states_batch[:, :, 0].ravel()
    ys = states_batch[:, :, 1].ravel()
    risk = field_.sample(xs, ys)
    off = (xs < field_._lo[0]) | (xs > field_._hi[0]) | \
          (ys < field_._lo[1]) | (ys > field_._hi[1])
    risk = np.where(off, RISK_CAP * 4.0, risk).reshape(N, K)
    return track + cfg.lam * risk.sum(axis=1)


# --- trajectory library -----------------------------------------------------

def stopping_controls(x0, model: DynamicsModel, T: int) -> np.ndarray:
    """Maximum deceleration toward zero velocity, no sign reversal."""
    controls = np.zeros((T, model.nu))
    if model.variant == DIFF_DRIVE:
        v = float(x0[3])
        for k in range(T):
            a = -np.sign(v) * min(model.a_max[0], abs(v) / model.dt)
            controls[k, 0] = a
            v += model.dt * a
    else:
        v = np.array(x0[3:6], dtype=float)
        for k in range(T):
            a = -np.sign(v) * np.minimum(model.a_max, np.abs(v) / model.dt)
            controls[k] = a
            v += model.dt * a
    return controls


def stopping_trajectory(x0, cfg: MpcConfig, model: DynamicsModel) -> Trajectory:
    return rollout(model, x0, stopping_controls(x0, model, cfg.T))


def _follower_controls(x0, path_pts, model: DynamicsModel, cfg: MpcConfig,
                       lookahead: float = 0.8) -> np.ndarray:
    """Pure-pursuit style follower of the geometric path."""
    T = cfg.T
    controls = np.zeros((T, model.nu))
    x = np.asarray(x0, dtype=float).copy()
    pts = np.asarray(path_pts)
    for k in range(T):
        d = np.hypot(*(pts - x[:2]).T)
        j = int(np.argmin(d))
        target = pts[min(j + max(1, int(round(lookahead / max(
            np.mean(np.hypot(*np.diff(pts, axis=0).T)) if len(pts) > 1 else 1.0,
            1e-6)))), len(pts) - 1)]
        heading_err = wrap_angle(math.atan2(target[1] - x[1], target[0] - x[0]) - x[2])
        if model.variant == DIFF_DRIVE:
            v_cmd = cfg.v_ref * max(0.2, math.cos(heading_err))
            a = np.clip((v_cmd - x[3]) / model.dt, -model.a_max[0], model.a_max[0])
            w = np.clip(2.0 * heading_err, -model.v_max[2], model.v_max[2])
            controls[k] = (a, w)
        else:
            v_cmd = cfg.v_ref * max(0.2, math.cos(heading_err))
            a = np.clip((v_cmd - x[3]) / model.dt, -model.a_max[0], model.a_max[0])
            ath = np.clip((2.0 * heading_err - x[5]) / model.dt,
                          -model.a_max[2], model.a_max[2])
            controls[k] = (a, 0.0, ath)
        x = step(model, x, controls[k])
    return controls


def _heuristic_controls(x0, model: DynamicsModel, cfg: MpcConfig):
    """Constant-curvature arcs plus v-turn / u-turn scripts."""
    T = cfg.T
    out = []
    lo, hi = model.control_bounds()
    for rate in cfg.library.arc_rates:
        u = np.zeros((T, model.nu))
        v = float(x0[3])
        for k in range(T):
            a = np.clip((cfg.v_ref - v) / model.dt, lo[0], hi[0])
            u[k, 0] = a
            v += model.dt * a
        if model.variant == DIFF_DRIVE:
            u[:, 1] = rate
        else:
            u[:, 2] = rate
        out.append(u)
    if cfg.library.include_turns and model.variant == DIFF_DRIVE:
        # u-turn: slow crawl at maximum yaw rate
        u = np.zeros((T, model.nu))
        u[:, 0] = np.clip((0.3 - x0[3]) / (model.dt * T), lo[0], hi[0])
        u[:, 1] = hi[1]
        out.append(u)
        # v-turn: brake/reverse while steering, then forward the other way
        u = np.zeros((T, model.nu))
        half = T // 2
        u[:half, 0] = lo[0] * 0.5
        u[:half, 1] = hi[1] * 0.7
        u[half:, 0] = hi[0] * 0.5
        u[half:, 1] = lo[1] * 0.7
        out.append(u)
    return out


def generate_trajectory_library(x0, reference: GeometricPath, prev_controls,
                                m: GridMap2p5D, cfg: MpcConfig,
                                model: DynamicsModel, rng_seed,
                                obstacles: ObstacleSet | None = None,
                                ref_states=None, field_: RiskField | None = None
                                ) -> CandidateSet:
    """Roll out and score the library of initial guesses; deterministic
    given the seed."""
    if reference is None or len(reference.poses) == 0:
        raise InvalidArgumentError("reference path is empty")
    if field_ is None:
        field_ = RiskField(m, cfg.risk_level())
    if obstacles is None:
        obstacles = extract_obstacles(m, cfg, around=x0, field_=field_)
    if ref_states is None:
        ref_states = _tracking_reference(reference, x0, model, cfg)

    lo, hi = model.control_bounds()
    seqs = []
    if prev_controls is not None and len(prev_controls) == cfg.T:
        seqs.append(np.asarray(prev_controls, dtype=float))
    seqs.append(stopping_controls(x0, model, cfg.T))
    seqs.append(_follower_controls(x0, reference.poses, model, cfg))
    seqs.extend(_heuristic_controls(x0, model, cfg))

    rng = np.random.default_rng(rng_seed)
    base = seqs[0]
    std = np.asarray(cfg.library.perturb_std[:model.nu])
    for _ in range(cfg.library.n_random):
        noise = rng.normal(0.0, 1.0, size=base.shape) * std
        seqs.append(np.clip(base + noise, lo, hi))

    batch = np.stack([np.clip(s, lo, hi) for s in seqs])
    states = rollout_batch(model, x0, batch)
    costs = _batch_costs(states, ref_states, field_, cfg)
    collisions = obstacles.collision_counts(states, cfg.footprint)

    entries = []
    for i in range(len(seqs)):
        traj = Trajectory(states=states[i], controls=batch[i], dt=model.dt)
        entries.append((traj, float(costs[i]), int(collisions[i])))
    entries.sort(key=lambda e: e[1])
    return CandidateSet(entries=entries)


def _sd_rows_batch(states, pairs, obstacles: ObstacleSet, cfg: MpcConfig,
                   h_xy: float = 1e-4, h_theta: float = 1e-4):
    """Active signed-distance constraints as (k, j, sd, grad) tuples in
    (step, obstacle) order.

    Distances and central-difference gradients are evaluated in a single
    vectorized pass per obstacle vertex count; matches the scalar
    signed_distance / signed_distance_gradient pair to rounding.
    """
    if not pairs:
        return []
    ks = np.array([k for k, _ in pairs], dtype=np.intp)
    js = np.array([j for _, j in pairs], dtype=np.intp)
    offsets = np.array([
        [h_xy, 0.0, 0.0], [-h_xy, 0.0, 0.0],
        [0.0, h_xy, 0.0], [0.0, -h_xy, 0.0],
        [0.0, 0.0, h_theta], [0.0, 0.0, -h_theta]])
    out = {}
    for sel, polys in obstacles.stacked_vertices(js):
        poses = states[ks[sel]][:, :3]
        fp = rect_vertices_batch(cfg.footprint, poses)
        sd0 = signed_distance_batch(fp, polys)
        keep = np.nonzero(sd0 <= cfg.sd_activation)[0]
        if not len(keep):
            continue
        probes = (poses[keep, None, :] + offsets[None, :, :]).reshape(-1, 3)
        va = rect_vertices_batch(cfg.footprint, probes)
        vb = np.repeat(polys[keep], len(offsets), axis=0)
        sd_p = signed_distance_batch(va, vb).reshape(len(keep), len(offsets))
        grads = np.stack([
            (sd_p[:, 0] - sd_p[:, 1]) / (2 * h_xy),
            (sd_p[:, 2] - sd_p[:, 3]) / (2 * h_xy),
            (sd_p[:, 4] - sd_p[:, 5]) / (2 * h_theta)], axis=1)
        for row, i in enumerate(keep):
            out[pairs[sel[i]]] = (float(sd0[i]), grads[row])
    return [(k, j, *out[(k, j)]) for k, j in pairs if (k, j) in out]


# --- QP assembly -------------------------------------------------------------

class _SparseBuilder:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []
        self.l = []
        self.u = []
        self.m = 0

    def add_row(self, cols, vals, lo, up):
        for c, v in zip(cols, vals):
            self.rows.append(self.m)
            self.cols.append(c)
            self.vals.append(v)
        self.l.append(lo)
        self.u.append(up)
        self.m += 1

    def matrix(self, n):
        A = sp.coo_matrix((self.vals, (self.rows, self.cols)),
                          shape=(self.m, n)).tocsc()
        return A, np.array(self.l), np.array(self.u)


def velocity_bound(rho, v_max, cfg: MpcConfig, gamma):
    """Admissible speed as a function of local risk.

    Default mapping is monotone non-increasing in risk; the literal
    risk-proportional form is available for fidelity experiments.
    """
    if cfg.literal_velocity_risk:
        return np.minimum(gamma * np.asarray(rho), v_max)
    frac = np.clip(1.0 - np.asarray(rho) / cfg.rho_max, cfg.v_floor_frac, 1.0)
    return gamma * v_max * frac


def build_sqp_qp(candidate: Trajectory, reference: GeometricPath,
                 m: GridMap2p5D, cfg: MpcConfig, model: DynamicsModel,
                 obstacles: ObstacleSet | None = None, ref_states=None,
                 field_: RiskField | None = None):
    """Assemble the QP over X = [dx_0..dx_T, du_0..du_{T-1}, slacks].

    Returns (QpProblem, meta) where meta records variable offsets and the
    slack count for solution extraction and audits.
    """
    T = candidate.horizon
    nx, nu = model.nx, model.nu
    if T != cfg.T:
        raise InvalidArgumentError("candidate horizon does not match config")
    states = candidate.states
    controls = candidate.controls
    for k in range(T + 1):
        if not m.in_extent(states[k, 0], states[k, 1]):
            raise OutOfBoundsError(f"candidate state {k} is off the map")
    if field_ is None:
        field_ = RiskField(m, cfg.risk_level())
    if obstacles is None:
        obstacles = extract_obstacles(m, cfg, around=states[0], field_=field_)
    if ref_states is None:
        ref_states = _tracking_reference(reference, states[0], model, cfg)

    n_core = (T + 1) * nx + T * nu
    ix = lambda k: k * nx
    iu = lambda k: (T + 1) * nx + k * nu

    b = _SparseBuilder()
    slack_cols = []

    def new_slack():
        slack_cols.append(len(slack_cols))
        return n_core + len(slack_cols) - 1

    # initial state pinned
    for j in range(nx):
        b.add_row([ix(0) + j], [1.0], 0.0, 0.0)

    # linearized dynamics; rollout-exact candidate means zero defect
    for k in range(T):
        A, B = linearize(model, states[k], controls[k])
        for j in range(nx):
            cols = [ix(k + 1) + j]
            vals = [1.0]
            for jj in range(nx):
                if A[j, jj] != 0.0:
                    cols.append(ix(k) + jj)
                    vals.append(-A[j, jj])
            for jj in range(nu):
                if B[j, jj] != 0.0:
                    cols.append(iu(k) + jj)
                    vals.append(-B[j, jj])
            b.add_row(cols, vals, 0.0, 0.0)

    # control limits (hard) and control box rows
    lo, hi = model.control_bounds()
    for k in range(T):
        for j in range(nu):
            b.add_row([iu(k) + j], [1.0],
                      lo[j] - controls[k, j], hi[j] - controls[k, j])
            b.add_row([iu(k) + j], [1.0], -cfg.eps_u, cfg.eps_u)

    # state box rows
    for k in range(1, T + 1):
        for j in range(nx):
            b.add_row([ix(k) + j], [1.0], -cfg.eps_x, cfg.eps_x)

    # velocity limits coupled to local risk (slacked)
    rho_path = field_.sample(*field_.clamp(states[:, 0], states[:, 1]))
    for k in range(1, T + 1):
        vb_x = velocity_bound(rho_path[k], model.v_max[0], cfg, cfg.gamma_v)
        s = new_slack()
        b.add_row([ix(k) + 3, s], [1.0, -1.0], -np.inf, vb_x - states[k, 3])
        b.add_row([ix(k) + 3, s], [1.0, 1.0], -vb_x - states[k, 3], np.inf)
        if model.variant != DIFF_DRIVE:
            vb_th = velocity_bound(rho_path[k], model.v_max[2], cfg, cfg.gamma_theta)
            s2 = new_slack()
            b.add_row([ix(k) + 5, s2], [1.0, -1.0], -np.inf, vb_th - states[k, 5])
            b.add_row([ix(k) + 5, s2], [1.0, 1.0], -vb_th - states[k, 5], np.inf)
    if model.variant == DIFF_DRIVE:
        # yaw rate is a control input here; same risk coupling, slacked
        for k in range(T):
            vb_th = velocity_bound(rho_path[k + 1], model.v_max[2], cfg,
                                   cfg.gamma_theta)
            s = new_slack()
            b.add_row([iu(k) + 1, s], [1.0, -1.0], -np.inf, vb_th - controls[k, 1])
            b.add_row([iu(k) + 1, s], [1.0, 1.0], -vb_th - controls[k, 1], np.inf)

    # signed-distance rows for nearby obstacles (slacked)
    sd_rows = 0
    if len(obstacles):
        fp_rad = math.hypot(cfg.footprint.half_length, cfg.footprint.half_width)
        pairs = [(k, j) for k in range(1, T + 1)
                 for j in obstacles.near_indices(states[k],
                                                 fp_rad + cfg.sd_activation)]
        for k, j, sd, grad in _sd_rows_batch(states, pairs, obstacles, cfg):
            s = new_slack()
            b.add_row([ix(k), ix(k) + 1, ix(k) + 2, s],
                      [grad[0], grad[1], grad[2], 1.0], -sd, np.inf)
            sd_rows += 1

    # orientation rows (slacked); only when the map carries normals
    if m.has_layer("n_z"):
        omegas, Js = orientation_constraints_many(m, states[1:])
        for k in range(1, T + 1):
            omega, J = omegas[k - 1], Js[k - 1]
            for j in range(2):
                if not np.any(J[j]) and abs(omega[j]) < 1e-12:
                    continue
                s = new_slack()
                b.add_row([ix(k), ix(k) + 1, ix(k) + 2, s],
                          [J[j, 0], J[j, 1], J[j, 2], -1.0],
                          -np.inf, cfg.omega_max[j] - omega[j])
                s2 = new_slack()
                b.add_row([ix(k), ix(k) + 1, ix(k) + 2, s2],
                          [J[j, 0], J[j, 1], J[j, 2], 1.0],
                          -cfg.omega_max[j] - omega[j], np.inf)

    n_slack = len(slack_cols)
    n = n_core + n_slack
    # slack nonnegativity
    for j in range(n_slack):
        b.add_row([n_core + j], [1.0], 0.0, np.inf)

    A, l, u = b.matrix(n)

    # cost: tracking + lam * risk expansion + slack penalty
    # (duplicate triplets sum on conversion, giving += semantics)
    prows, pcols, pvals = [], [], []
    q = np.zeros(n)
    Q = np.asarray(cfg.q_weights[:nx])
    for k in range(T + 1):
        err = states[k] - ref_states[k]
        err[2] = wrap_angle(err[2])
        for j in range(nx):
            prows.append(ix(k) + j)
            pcols.append(ix(k) + j)
            pvals.append(2.0 * Q[j])
            q[ix(k) + j] += 2.0 * Q[j] * err[j]
    g, H = _risk_expansion(field_, states[1:, :2], m.resolution / 4.0)
    for k in range(1, T + 1):
        gk = cfg.lam * g[k - 1]
        Hk = cfg.lam * H[k - 1]
        for a_ in range(3):
            q[ix(k) + a_] += gk[a_]
            for b_ in range(3):
                if Hk[a_, b_] != 0.0:
                    prows.append(ix(k) + a_)
                    pcols.append(ix(k) + b_)
                    pvals.append(Hk[a_, b_])
    for k in range(T):
        for j in range(nu):
            prows.append(iu(k) + j)
            pcols.append(iu(k) + j)
            pvals.append(2e-6)  # conditioning only
    for j in range(n_slack):
        prows.append(n_core + j)
        pcols.append(n_core + j)
        pvals.append(2.0 * cfg.lambda_eps)

    P = sp.coo_matrix((pvals, (prows, pcols)), shape=(n, n)).tocsc()
    P = (P + P.T) * 0.5
    problem = QpProblem(P=P, q=q, A=A, l=l, u=u)
    meta = {"n_core": n_core, "n_slack": n_slack, "T": T, "nx": nx, "nu": nu,
            "sd_rows": sd_rows}
    return problem, meta


def extract_du(solution_x, meta) -> np.ndarray:
    T, nx, nu = meta["T"], meta["nx"], meta["nu"]
    off = (T + 1) * nx
    return np.asarray(solution_x[off:off + T * nu]).reshape(T, nu)


# --- linesearch ---------------------------------------------------------------

def linesearch(candidate: Trajectory, delta_u, m: GridMap2p5D, cfg: MpcConfig,
               model: DynamicsModel, gamma_init, obstacles: ObstacleSet | None = None,
               ref_states=None, reference: GeometricPath | None = None,
               field_: RiskField | None = None):
    """Find a correction coefficient for u <- u + gamma * du.

    Accepts the first gamma whose rolled-out cost and collision count are
    both non-increasing; doubles on success (capped), halves on failure
    (floored).  Returns (gamma_applied, gamma_next, accepted).
    """
    delta_u = np.asarray(delta_u, dtype=float)
    if delta_u.shape != candidate.controls.shape:
        raise InvalidArgumentError("delta_u shape mismatch")
    if field_ is None:
        field_ = RiskField(m, cfg.risk_level())
    if obstacles is None:
        obstacles = extract_obstacles(m, cfg, around=candidate.states[0],
                                      field_=field_)
    if ref_states is None:
        if reference is None:
            raise InvalidArgumentError("need ref_states or reference path")
        ref_states = _tracking_reference(reference, candidate.states[0], model, cfg)
    ls = cfg.linesearch
    lo, hi = model.control_bounds()

    base_cost = trajectory_cost(candidate.states, ref_states, field_, cfg)
    base_obs = int(obstacles.collision_counts(candidate.states[None], cfg.footprint)[0])

    gamma = float(np.clip(gamma_init, ls.gamma_min, ls.gamma_max))
    for _ in range(ls.max_iter):
        u_try = np.clip(candidate.controls + gamma * delta_u, lo, hi)
        states = rollout_batch(model, candidate.states[0], u_try[None])[0]
        cost = float(_batch_costs(states[None], ref_states, field_, cfg)[0])
        obs = int(obstacles.collision_counts(states[None], cfg.footprint)[0])
        if cost <= base_cost and obs <= base_obs:
            return gamma, min(2.0 * gamma, ls.gamma_max), True
        gamma = max(gamma / 2.0, ls.gamma_min)
    return gamma, gamma, False


# --- replan loop -----------------------------------------------------------------

def shift_controls(controls: np.ndarray) -> np.ndarray:
    """Advance the previous solution one step (repeat the final control)."""
    if len(controls) == 0:
        return controls
    return np.vstack([controls[1:], controls[-1:]])


def replan(x0, prev: ReplanResult | None, reference: GeometricPath,
           m: GridMap2p5D, cfg: MpcConfig, model: DynamicsModel,
           rng_seed=0) -> ReplanResult:
    """One MPC planning cycle; deterministic for identical inputs."""
    if reference is None or len(reference.poses) == 0:
        raise InvalidArgumentError("reference path is empty")
    if not m.in_extent(x0[0], x0[1]):
        raise OutOfBoundsError("initial state is off the map")
    t_start = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)

    field_ = RiskField(m, cfg.risk_level())
    obstacles = extract_obstacles(m, cfg, around=x0, field_=field_)
    ref_states = _tracking_reference(reference, x0, model, cfg)

    prev_controls = None
    gamma = cfg.linesearch.gamma_init
    if prev is not None and prev.feasible and prev.trajectory.horizon == cfg.T:
        prev_controls = shift_controls(prev.trajectory.controls)
        gamma = prev.stats.gamma

    stats = ReplanStats(gamma=gamma)
    candidate = None
    warm_x = warm_y = None
    for i in range(cfg.qp_iterations):
        lib = generate_trajectory_library(
            x0, reference, prev_controls, m, cfg, model,
            rng_seed=(rng_seed, i), obstacles=obstacles, ref_states=ref_states,
            field_=field_)
        traj, cost, collisions = lib.best()
        candidate = traj
        stats.iterations = i + 1
        try:
            problem, meta = build_sqp_qp(candidate, reference, m, cfg, model,
                                         obstacles=obstacles, ref_states=ref_states,
                                         field_=field_)
        except OutOfBoundsError:
            break
        if warm_x is not None and (len(warm_x) != problem.n
                                   or len(warm_y) != problem.m):
            warm_x = warm_y = None  # slack layout changed between iterations
        sol = solve_qp(problem, cfg.qp_settings, warm_x=warm_x, warm_y=warm_y)
        stats.qp_primal_residual = sol.primal_residual
        stats.qp_dual_residual = sol.dual_residual
        if sol.status == "primal_infeasible":
            break
        warm_x, warm_y = sol.x, sol.y
        du = extract_du(sol.x, meta)
        g_applied, g_next, accepted = linesearch(
            candidate, du, m, cfg, model, gamma,
            obstacles=obstacles, ref_states=ref_states, field_=field_)
        gamma = g_next
        stats.gamma = gamma
        if accepted:
            lo, hi = model.control_bounds()
            new_u = np.clip(candidate.controls + g_applied * du, lo, hi)
            candidate = rollout(model, x0, new_u)
            prev_controls = new_u

    if candidate is None:
        candidate = stopping_trajectory(x0, cfg, model)
        feasible = False
    else:
        final_collisions = int(
            obstacles.collision_counts(candidate.states[None], cfg.footprint)[0])
        if final_collisions > 0:
            candidate = stopping_trajectory(x0, cfg, model)
            feasible = False
        else:
            # re-roll so the returned trajectory is exactly dynamics-consistent
            candidate = rollout(model, x0, candidate.controls)
            feasible = True
    stats.wall_time = time.perf_counter() - t_start
    return ReplanResult(trajectory=candidate, feasible=feasible,
                        alpha_used=cfg.alpha, stats=stats)


# --- dynamic risk adjustment ------------------------------------------------------

@dataclass
class AlphaPolicy:
    step: float = 0.1
    alpha_min: float = 0.05
    alpha_mission: float = 0.9
    window: int = 5


def adjust_alpha(current: RiskLevel, outcome: str, policy: AlphaPolicy,
                 feasible_streak: int = 0) -> RiskLevel:
    """Lower alpha when planning fails; restore it after sustained success."""
    a = current.alpha
    if outcome in ("infeasible", "stuck"):
        a = max(policy.alpha_min, a - policy.step)
    elif outcome == "feasible" and feasible_streak >= policy.window:
        a = min(policy.alpha_mission, a + policy.step)
    return RiskLevel(min(max(a, policy.alpha_min), policy.alpha_mission))
