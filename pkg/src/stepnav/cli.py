"""Command-line surface: world generation, risk building, planning,
simulation batches, and static rendering.

Every subcommand exits 0 on success and nonzero with a single
``error: <reason>`` line on stderr otherwise.  Randomized commands take
--seed and are reproducible under it; timing fields are zeroed unless
--timing is passed so that fixed-seed outputs are byte-identical.
"""

from __future__ import annotations

import csv as _csv
import functools
import json
import logging
import math
import os
import sys

import click
import numpy as np

from stepnav.config import PlannerConfig, load_config
from stepnav.errors import StepNavError
from stepnav.geometric import GeomPlanConfig, plan_geometric
from stepnav.grid_map import load_map, save_map
from stepnav.mpc import MpcConfig, replan
from stepnav.render import Overlays, RenderStyle, write_image
from stepnav.risk import RiskLevel, build_risk_layers
from stepnav.sim import (WorldSpec, generate_random_world, monte_carlo,
                         write_results, _episode_for_run)

log = logging.getLogger("stepnav")


def _fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (StepNavError, OSError, ValueError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _load(config):
    return load_config(config) if config else PlannerConfig()


def _parse_point(text, name):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        parts = []
    if len(parts) != 2:
        raise click.UsageError(f"--{name} must be 'x,y', got {text!r}")
    return tuple(parts)


@click.group()
def main():
    """Stochastic traversability evaluation and planning toolkit."""
    level = os.environ.get("STEP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-world")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=None, help="World side length in cells.")
@click.option("--out", type=click.Path(), required=True, help="True-map output path.")
@click.option("--observed-out", type=click.Path(), default=None,
              help="Also write the noisy observed map.")
@_fail_cleanly
def gen_world(config, seed, size, out, observed_out):
    """Generate a random world and write the ground-truth map."""
    cfg = _load(config)
    fields = {**cfg.world.__dict__, "seed": seed}
    if size is not None:
        fields["size"] = size
    spec = WorldSpec(**fields)
    true_map, observed = generate_random_world(spec)
    save_map(true_map, out)
    if observed_out:
        save_map(observed, observed_out)
    log.info("world seed=%d size=%d written to %s", seed, spec.size, out)


@main.command("build-risk")
@click.option("--map", "map_path", type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--alpha", type=float, default=None, help="Risk level override.")
@click.option("--out", type=click.Path(), required=True)
@_fail_cleanly
def build_risk(map_path, config, alpha, out):
    """Compute risk factor, aggregate, and CVaR layers for a map."""
    cfg = _load(config)
    m = load_map(map_path)
    level = RiskLevel(alpha if alpha is not None else cfg.alpha)
    build_risk_layers(m, cfg.risk_factors, level)
    save_map(m, out)
    log.info("risk layers at alpha=%.3f written to %s", level.alpha, out)


@main.command("plan-geometric")
@click.option("--map", "map_path", type=click.Path(exists=True), required=True)
@click.option("--start", required=True, help="Start 'x,y' in meters.")
@click.option("--goal", required=True, help="Goal 'x,y' in meters.")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--out", type=click.Path(), default=None, help="Default: stdout.")
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@_fail_cleanly
def plan_geometric_cmd(map_path, start, goal, config, alpha, out, fmt):
    """A* plan on the map's risk layers; prints waypoints."""
    cfg = _load(config)
    m = load_map(map_path)
    g = cfg.geometric
    geo = GeomPlanConfig(lam=g.lam, alpha=alpha if alpha is not None else g.alpha,
                         lethal_threshold=g.lethal_threshold)
    path = plan_geometric(m, _parse_point(start, "start"),
                          _parse_point(goal, "goal"), geo)
    if path is None:
        click.echo("error: no path (goal unreachable under the lethal "
                   "threshold)", err=True)
        sys.exit(2)
    lines = []
    if fmt == "csv":
        lines.append("x,y")
        lines += [f"{x:.6f},{y:.6f}" for x, y in path.poses]
    else:
        lines.append(f"# waypoints={len(path.poses)} total_risk={path.total_risk:.6f}")
        lines += [f"{x:.6f} {y:.6f}" for x, y in path.poses]
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        click.echo(text, nl=False)


@main.command("plan-mpc")
@click.option("--map", "map_path", type=click.Path(exists=True), required=True)
@click.option("--start", required=True, help="Start 'x,y' in meters.")
@click.option("--goal", required=True, help="Goal 'x,y' in meters.")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Default: stdout.")
@click.option("--timing", is_flag=True,
              help="Keep measured wall times (breaks byte-determinism).")
@_fail_cleanly
def plan_mpc(map_path, start, goal, config, alpha, seed, out, timing):
    """Geometric plan plus one kinodynamic replan; prints the trajectory."""
    cfg = _load(config)
    m = load_map(map_path)
    s = _parse_point(start, "start")
    g = _parse_point(goal, "goal")
    geo = cfg.geometric
    a = alpha if alpha is not None else cfg.mpc.alpha
    geo = GeomPlanConfig(lam=geo.lam, alpha=a, lethal_threshold=geo.lethal_threshold)
    path = plan_geometric(m, s, g, geo)
    if path is None:
        click.echo("error: no geometric path to seed the MPC", err=True)
        sys.exit(2)
    mpc_cfg = MpcConfig(**{**cfg.mpc.__dict__, "alpha": a})
    model = cfg.dynamics
    x0 = np.zeros(model.nx)
    x0[0], x0[1] = s
    x0[2] = math.atan2(g[1] - s[1], g[0] - s[0])
    result = replan(x0, None, path, m, mpc_cfg, model, rng_seed=seed)
    doc = result.trajectory.to_dict()
    doc.update(feasible=result.feasible, alpha_used=result.alpha_used,
               iterations=result.stats.iterations,
               wall_time_ms=result.stats.wall_time * 1000.0 if timing else 0.0)
    text = json.dumps(doc, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        click.echo(text, nl=False)


def _emit_rows(rows, out, fmt):
    if fmt == "csv" or out:
        if out:
            write_results(rows, None, out)
        else:
            writer = _csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    else:
        for r in rows:
            click.echo(" ".join(f"{k}={v}" for k, v in r.items()))


@main.command("simulate")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--alpha", type=float, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@click.option("--timing", is_flag=True)
@_fail_cleanly
def simulate(config, seed, alpha, out, fmt, timing):
    """One closed-loop episode on a random world."""
    cfg = _load(config)
    a = alpha if alpha is not None else cfg.sim.geometric.alpha
    row = _episode_for_run(seed, 0, a, cfg.world, cfg.sim)
    if not timing:
        row["wall_time_ms"] = 0.0
    _emit_rows([row], out, fmt)
    sys.exit(0 if row["success"] else 3)


@main.command("monte-carlo")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--runs", type=int, default=50, show_default=True)
@click.option("--alphas", default="0.05,0.3,0.5,0.7,0.95", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Per-episode CSV.")
@click.option("--aggregate-out", type=click.Path(), default=None,
              help="Per-alpha aggregate JSON.")
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@click.option("--timing", is_flag=True)
@_fail_cleanly
def monte_carlo_cmd(config, runs, alphas, seed, jobs, out, aggregate_out, fmt, timing):
    """Batch study over random worlds at several risk levels."""
    cfg = _load(config)
    alpha_list = [float(a) for a in alphas.split(",") if a.strip()]
    rows, aggregates = monte_carlo(runs, alpha_list, cfg.world, cfg.sim,
                                   master_seed=seed, jobs=jobs)
    if not timing:
        for r in rows:
            r["wall_time_ms"] = 0.0
    if out or aggregate_out:
        write_results(rows, aggregates, out or os.devnull, aggregate_out)
    if not out:
        _emit_rows(rows, None, fmt)
    for agg in aggregates:
        log.info("alpha=%.2f success=%.2f median_len=%.2f median_risk=%.3f",
                 agg["alpha"], agg["success_rate"],
                 agg["path_length_m_median"], agg["max_risk_median"])


@main.command("render")
@click.option("--map", "map_path", type=click.Path(exists=True), required=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="PPM output path.")
@click.option("--overlay-path", type=click.Path(exists=True), default=None,
              help="Waypoint file from plan-geometric (text or csv).")
@click.option("--pixels-per-cell", type=int, default=4, show_default=True)
@_fail_cleanly
def render_cmd(map_path, alpha, out, overlay_path, pixels_per_cell):
    """Rasterize the map's risk classes (and optional path) to a PPM image."""
    m = load_map(map_path)
    overlays = Overlays()
    if overlay_path:
        pts = []
        with open(overlay_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip().replace(",", " ")
                if not line or line.startswith("#") or line.startswith("x "):
                    continue
                x, y = line.split()[:2]
                pts.append((float(x), float(y)))
        if len(pts) >= 2:
            overlays.paths.append(np.array(pts))
    style = RenderStyle(pixels_per_cell=pixels_per_cell)
    write_image(m, RiskLevel(alpha), out, overlays, style)


if __name__ == "__main__":
    main()
