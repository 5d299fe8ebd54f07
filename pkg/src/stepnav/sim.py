"""Closed-loop simulator and Monte Carlo harness.

Worlds are random smooth elevation plus lethal and moderate-risk blobs;
perception is the true per-cell risk corrupted by fresh Gaussian noise at
every cycle (no localization or tracking error).  Episodes run the full
stack: geometric plan on the observed map, kinodynamic replan, first
control applied through the true dynamics.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from stepnav.errors import InvalidArgumentError
from stepnav.dynamics import DynamicsModel, step
from stepnav.geometric import GeomPlanConfig, plan_geometric
from stepnav.grid_map import GridMap2p5D, compute_surface_normals, create_map
from stepnav.mpc import (AlphaPolicy, LibraryConfig, MpcConfig, ReplanResult,
                         adjust_alpha, replan)
from stepnav.qp import QpSettings
from stepnav.risk import RISK_CAP, RiskLevel


@dataclass
class WorldSpec:
    seed: int = 0
    size: int = 64
    resolution: float = 0.25
    elevation_amplitude: float = 0.15
    elevation_octaves: int = 2
    lethal_blob_count: int = 4
    lethal_blob_radius: tuple = (0.4, 1.0)      # meters
    risk_blob_count: int = 6
    risk_blob_radius: tuple = (0.8, 1.8)
    risk_blob_level: tuple = (0.45, 0.74)       # true mu inside moderate areas
    risk_wall_count: int = 4                    # elongated strips with one gap:
    risk_wall_thickness: tuple = (1.2, 2.2)     # short risky crossing vs a long
    risk_wall_length: tuple = (8.0, 14.0)       # safe detour through the gap
    risk_wall_gap: tuple = (1.5, 2.5)
    texture_scale: float = 0.15                 # smooth background risk
    sigma_percep: float = 0.15

    def __post_init__(self):
        if self.size < 8 or self.resolution <= 0:
            raise InvalidArgumentError("world must be at least 8 cells with res > 0")


def _sim_mpc_default() -> MpcConfig:
    """Shorter horizon and a looser QP than the planner defaults: closed-loop
    batches replan every step, so per-cycle polish buys little."""
    return MpcConfig(T=8, dt=0.3, qp_iterations=1, sd_activation=1.5, v_ref=1.2,
                     library=LibraryConfig(n_random=3),
                     qp_settings=QpSettings(tol_abs=2e-2, tol_rel=2e-2,
                                            max_iter=120, check_interval=20,
                                            rho=10.0,
                                            rho_update_interval=20))


@dataclass
class SimConfig:
    goal_tolerance: float = 0.5
    step_cap: int = 120
    lethal_mu: float = 0.9                      # true-mu entry that ends the run
    stuck_window: int = 8
    stuck_distance: float = 0.15
    no_path_patience: int = 5     # blocked observations tolerated at alpha_min
    goal_distance: float = 8.0
    alpha_policy: AlphaPolicy = field(default_factory=AlphaPolicy)
    geometric: GeomPlanConfig = field(default_factory=lambda: GeomPlanConfig(
        lam=5.0, alpha=0.5, lethal_threshold=0.75))
    mpc: MpcConfig = field(default_factory=_sim_mpc_default)
    dynamics: DynamicsModel = field(default_factory=lambda: DynamicsModel(dt=0.3))


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    max_risk: float
    mean_cvar: float
    steps: int
    wall_time: float
    failure_reason: str | None = None


def _smooth_noise(rng, n, octaves, amplitude):
    out = np.zeros((n, n))
    for o in range(octaves):
        sigma = max(n / (6.0 * 2 ** o), 1.0)
        out += ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma) * (0.5 ** o)
    peak = np.max(np.abs(out))
    return out * (amplitude / peak) if peak > 0 else out


def generate_random_world(spec: WorldSpec):
    """Returns (true_map, observed_map); deterministic in the seed.

    The true map carries ground-truth risk_mu with zero sigma; the observed
    map shares the terrain and gets its noisy risk layers from observe().
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    res = spec.resolution
    true_map = create_map(n, n, res, (0.0, 0.0))
    elevation = _smooth_noise(rng, n, spec.elevation_octaves, spec.elevation_amplitude)
    true_map.add_layer("elevation", elevation)
    compute_surface_normals(true_map)

    mu = np.clip(_smooth_noise(rng, n, 2, spec.texture_scale), 0.0, None)
    cols = np.arange(n) * res
    xx, yy = np.meshgrid(cols, cols)

    def paint_blobs(count, radius_range, level_range):
        nonlocal mu
        for _ in range(count):
            cx, cy = rng.uniform(0, n * res, size=2)
            r = rng.uniform(*radius_range)
            lvl = rng.uniform(*level_range)
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
            mu = np.where(inside, np.maximum(mu, lvl), mu)

    def paint_walls(count):
        nonlocal mu
        for _ in range(count):
            cx, cy = rng.uniform(0.2 * n * res, 0.8 * n * res, size=2)
            phi = rng.uniform(0, math.pi)
            half_len = 0.5 * rng.uniform(*spec.risk_wall_length)
            half_thick = 0.5 * rng.uniform(*spec.risk_wall_thickness)
            half_gap = 0.5 * rng.uniform(*spec.risk_wall_gap)
            gap_at = rng.uniform(-0.6, 0.6) * half_len
            lvl = rng.uniform(*spec.risk_blob_level)
            t = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
            s = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
            inside = (np.abs(s) <= half_thick) & (np.abs(t) <= half_len) \
                & (np.abs(t - gap_at) > half_gap)
            mu = np.where(inside, np.maximum(mu, lvl), mu)

    paint_blobs(spec.risk_blob_count, spec.risk_blob_radius, spec.risk_blob_level)
    paint_walls(spec.risk_wall_count)
    paint_blobs(spec.lethal_blob_count, spec.lethal_blob_radius, (1.0, 1.0))
    mu = np.clip(mu, 0.0, RISK_CAP)
    true_map.add_layer("risk_mu", mu)
    true_map.add_layer("risk_sigma", np.zeros((n, n)))
    true_map.add_layer("cvar", mu)

    observed = true_map.copy()
    observe(true_map, observed, spec, rng=np.random.default_rng((spec.seed, 1)))
    return true_map, observed


def observe(true_map: GridMap2p5D, observed: GridMap2p5D, spec: WorldSpec, rng):
    """Refresh the observed risk layers with fresh perception noise."""
    mu_true = true_map.get_layer("risk_mu")
    if spec.sigma_percep > 0:
        noise = rng.normal(0.0, spec.sigma_percep, size=mu_true.shape)
    else:
        noise = 0.0
    mu_obs = np.clip(mu_true + noise, 0.0, RISK_CAP)
    observed.add_layer("risk_mu", mu_obs)
    observed.add_layer("risk_sigma", np.full(mu_true.shape, spec.sigma_percep))
    return observed


def _initial_state(start, goal, model: DynamicsModel):
    x = np.zeros(model.nx)
    x[0], x[1] = start
    x[2] = math.atan2(goal[1] - start[1], goal[0] - start[0])
    return x


def run_episode(world, start, goal, cfg: SimConfig, seed=0,
                world_spec: WorldSpec | None = None) -> EpisodeResult:
    """Closed loop until goal, step cap, lethal-cell entry, or no path."""
    true_map, observed = world
    spec = world_spec or WorldSpec()
    model = cfg.dynamics
    rng = np.random.default_rng((seed, 2))
    t0 = time.perf_counter()

    mu_true = true_map.get_layer("risk_mu")
    x = _initial_state(start, goal, model)
    r, c = true_map.cell_of(x[0], x[1])
    if mu_true[r, c] >= cfg.lethal_mu:
        raise InvalidArgumentError("start cell is not traversable in the true map")

    alpha = RiskLevel(cfg.geometric.alpha)
    mission_alpha = cfg.geometric.alpha
    policy = cfg.alpha_policy
    feasible_streak = 0

    path_length = 0.0
    max_risk = float(mu_true[r, c])
    cvar_sum = 0.0
    cvar_count = 0
    prev_plan: ReplanResult | None = None
    recent = [x[:2].copy()]
    failure = None
    steps = 0
    no_path_streak = 0

    for steps in range(1, cfg.step_cap + 1):
        observe(true_map, observed, spec, rng)

        geo_cfg = GeomPlanConfig(lam=cfg.geometric.lam, alpha=alpha.alpha,
                                 lethal_threshold=cfg.geometric.lethal_threshold)
        path = plan_geometric(observed, (x[0], x[1]), goal, geo_cfg)
        if path is None:
            if alpha.alpha > policy.alpha_min + 1e-12:
                alpha = adjust_alpha(alpha, "infeasible", policy)
                feasible_streak = 0
                continue
            # fully backed off: tolerate a few blocked observations, since
            # fresh perception noise may reopen the map next cycle
            no_path_streak += 1
            if no_path_streak <= cfg.no_path_patience:
                continue
            failure = "no_geometric_path"
            break
        no_path_streak = 0

        mpc_cfg = cfg.mpc
        if abs(mpc_cfg.alpha - alpha.alpha) > 1e-12:
            mpc_cfg = MpcConfig(**{**mpc_cfg.__dict__, "alpha": alpha.alpha})
        result = replan(x, prev_plan, path, observed, mpc_cfg, model,
                        rng_seed=(seed, steps))
        prev_plan = result if result.feasible else None

        planned = result.trajectory
        cvar_sum += float(np.mean(
            _planned_cvar(observed, planned, alpha)))
        cvar_count += 1

        # apply the first control through the true dynamics (no tracking error)
        u0 = planned.controls[0] if planned.horizon else np.zeros(model.nu)
        x_new = step(model, x, u0)
        path_length += float(np.hypot(x_new[0] - x[0], x_new[1] - x[1]))
        x = x_new

        if not true_map.in_extent(x[0], x[1]):
            failure = "left_map"
            break
        r, c = true_map.cell_of(x[0], x[1])
        max_risk = max(max_risk, float(mu_true[r, c]))
        if mu_true[r, c] >= cfg.lethal_mu:
            failure = "entered_lethal_cell"
            break

        if math.hypot(x[0] - goal[0], x[1] - goal[1]) <= cfg.goal_tolerance:
            break

        # dynamic risk adjustment: back off when stuck, restore when healthy
        recent.append(x[:2].copy())
        if len(recent) > cfg.stuck_window:
            recent.pop(0)
        moved = math.hypot(*(recent[-1] - recent[0]))
        stuck = len(recent) == cfg.stuck_window and moved < cfg.stuck_distance
        if not result.feasible or stuck:
            alpha = adjust_alpha(alpha, "stuck" if stuck else "infeasible", policy)
            feasible_streak = 0
        else:
            feasible_streak += 1
            if alpha.alpha < mission_alpha - 1e-12:
                new = adjust_alpha(alpha, "feasible", policy, feasible_streak)
                if new.alpha != alpha.alpha:
                    feasible_streak = 0
                alpha = RiskLevel(min(new.alpha, mission_alpha))
    else:
        failure = "step_cap"

    success = failure is None and \
        math.hypot(x[0] - goal[0], x[1] - goal[1]) <= cfg.goal_tolerance
    if failure is None and not success:
        failure = "step_cap"
    return EpisodeResult(
        success=success,
        path_length=path_length,
        max_risk=max_risk,
        mean_cvar=cvar_sum / cvar_count if cvar_count else 0.0,
        steps=steps,
        wall_time=time.perf_counter() - t0,
        failure_reason=None if success else failure)


def _planned_cvar(observed, planned, alpha: RiskLevel):
    from stepnav.mpc import RiskField
    field_ = RiskField(observed, alpha)
    xs = planned.states[:, 0]
    ys = planned.states[:, 1]
    return field_.sample(*field_.clamp(xs, ys))


def sample_start_goal(spec: WorldSpec, cfg: SimConfig, rng):
    """Random start plus a goal at the configured distance, both on cells
    that are traversable in the true world; retries until found."""
    n = spec.size
    res = spec.resolution
    margin = 1.0
    extent = n * res
    for _ in range(200):
        start = rng.uniform(margin, extent - margin, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        goal = start + cfg.goal_distance * np.array([math.cos(angle), math.sin(angle)])
        if not (margin <= goal[0] <= extent - margin
                and margin <= goal[1] <= extent - margin):
            continue
        yield tuple(start), tuple(goal)
    raise RuntimeError("could not place start/goal inside the world")


def _episode_for_run(master_seed: int, run_id: int, alpha: float,
                     spec: WorldSpec, cfg: SimConfig):
    """One (world, alpha) episode; seeds depend only on (master_seed, run_id)
    so results are independent of batch composition."""
    seq = np.random.SeedSequence((master_seed, run_id))
    world_seed, place_seed, episode_seed = (int(s.generate_state(1)[0])
                                            for s in seq.spawn(3))
    w_spec = WorldSpec(**{**spec.__dict__, "seed": world_seed})
    world = generate_random_world(w_spec)
    rng = np.random.default_rng(place_seed)
    mu_true = world[0].get_layer("risk_mu")
    start = goal = None
    for s, g in sample_start_goal(w_spec, cfg, rng):
        rs, cs = world[0].cell_of(*s)
        rg, cg = world[0].cell_of(*g)
        if mu_true[rs, cs] >= 0.3 or mu_true[rg, cg] >= 0.3:
            continue
        # require the pair to be connected in the noise-free true world
        if plan_geometric(world[0], s, g, cfg.geometric) is not None:
            start, goal = s, g
            break
    ep_cfg = SimConfig(**{**cfg.__dict__})
    ep_cfg.geometric = GeomPlanConfig(lam=cfg.geometric.lam, alpha=alpha,
                                      lethal_threshold=cfg.geometric.lethal_threshold)
    ep_cfg.mpc = MpcConfig(**{**cfg.mpc.__dict__, "alpha": alpha})
    ep_cfg.alpha_policy = AlphaPolicy(**{**cfg.alpha_policy.__dict__,
                                         "alpha_mission": alpha})
    result = run_episode(world, start, goal, ep_cfg, seed=episode_seed,
                         world_spec=w_spec)
    return {
        "run_id": run_id, "alpha": alpha, "seed": world_seed,
        "success": result.success,
        "path_length_m": result.path_length,
        "max_risk": result.max_risk,
        "mean_cvar": result.mean_cvar,
        "steps": result.steps,
        "wall_time_ms": result.wall_time * 1000.0,
        "failure_reason": result.failure_reason or "",
    }


def monte_carlo(n_runs: int, alpha_list, spec: WorldSpec, cfg: SimConfig,
                master_seed: int = 0, jobs: int = 1):
    """Batch study: n_runs worlds, each evaluated at every alpha.

    Returns (rows, aggregates).  Deterministic given the master seed,
    regardless of the job count.
    """
    if n_runs < 1:
        raise InvalidArgumentError("n_runs must be >= 1")
    tasks = [(master_seed, run_id, float(a), spec, cfg)
             for run_id in range(n_runs) for a in alpha_list]
    if jobs > 1:
        import multiprocessing as mp
        with mp.Pool(jobs) as pool:
            rows = pool.starmap(_episode_for_run, tasks)
    else:
        rows = [_episode_for_run(*t) for t in tasks]
    rows.sort(key=lambda r: (r["run_id"], r["alpha"]))

    aggregates = []
    for a in alpha_list:
        sub = [r for r in rows if r["alpha"] == float(a)]
        lengths = np.array([r["path_length_m"] for r in sub if r["success"]])
        risks = np.array([r["max_risk"] for r in sub if r["success"]])
        agg = {"alpha": float(a),
               "runs": len(sub),
               "success_rate": sum(r["success"] for r in sub) / len(sub)}
        for name, vals in (("path_length_m", lengths), ("max_risk", risks)):
            if len(vals):
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                agg[f"{name}_median"] = float(med)
                agg[f"{name}_q1"] = float(q1)
                agg[f"{name}_q3"] = float(q3)
            else:
                agg[f"{name}_median"] = agg[f"{name}_q1"] = agg[f"{name}_q3"] = \
                    float("nan")
        aggregates.append(agg)
    return rows, aggregates


RESULT_COLUMNS = ["run_id", "alpha", "seed", "success", "path_length_m",
                  "max_risk", "mean_cvar", "steps", "wall_time_ms",
                  "failure_reason"]


def write_results(rows, aggregates, rows_path, aggregate_path=None):
    with open(rows_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in RESULT_COLUMNS})
    if aggregate_path is not None:
        with open(aggregate_path, "w", encoding="utf-8") as f:
            json.dump({"aggregates": aggregates}, f, indent=2)
