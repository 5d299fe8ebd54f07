import json

import numpy as np
import pytest
from click.testing import CliRunner

from stepnav.cli import main
from stepnav.grid_map import load_map

runner = CliRunner()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    true_path = d / "true.npz"
    obs_path = d / "observed.npz"
    res = runner.invoke(main, ["gen-world", "--seed", "3", "--size", "40",
                               "--out", str(true_path),
                               "--observed-out", str(obs_path)])
    assert res.exit_code == 0, res.output
    return true_path, obs_path


def test_gen_world_deterministic(world, tmp_path):
    true_path, _ = world
    again = tmp_path / "again.npz"
    res = runner.invoke(main, ["gen-world", "--seed", "3", "--size", "40",
                               "--out", str(again)])
    assert res.exit_code == 0
    a, b = load_map(true_path), load_map(again)
    for name in a.layers:
        np.testing.assert_array_equal(a.get_layer(name), b.get_layer(name))


def test_build_risk_adds_layers(world, tmp_path):
    true_path, _ = world
    out = tmp_path / "risk.npz"
    res = runner.invoke(main, ["build-risk", "--map", str(true_path),
                               "--alpha", "0.9", "--out", str(out)])
    assert res.exit_code == 0, res.output
    m = load_map(out)
    assert m.has_layer("cvar") and m.has_layer("risk_mu")


def safe_points(path):
    """A close start/goal pair on low-risk cells of the observed map."""
    m = load_map(path)
    mu = m.get_layer("risk_mu")
    ok = np.argwhere(mu < 0.1)
    r0, c0 = ok[0]
    for r1, c1 in ok[::-1]:
        if 8 <= abs(int(r1) - int(r0)) + abs(int(c1) - int(c0)) <= 30:
            break
    s = m.world_of(int(r0), int(c0))
    g = m.world_of(int(r1), int(c1))
    return f"{s[0]},{s[1]}", f"{g[0]},{g[1]}"


def test_plan_geometric_text_and_csv(world):
    _, obs_path = world
    start, goal = safe_points(obs_path)
    res = runner.invoke(main, ["plan-geometric", "--map", str(obs_path),
                               "--start", start, "--goal", goal])
    assert res.exit_code == 0, res.output
    assert res.output.startswith("# waypoints=")
    res_csv = runner.invoke(main, ["plan-geometric", "--map", str(obs_path),
                                   "--start", start, "--goal", goal,
                                   "--format", "csv"])
    assert res_csv.exit_code == 0
    lines = res_csv.output.strip().splitlines()
    assert lines[0] == "x,y"
    assert len(lines) == len(res.output.strip().splitlines())


def test_plan_geometric_no_path_exit_2(world):
    _, obs_path = world
    start, _ = safe_points(obs_path)
    # goal outside the map extent is unreachable
    res = runner.invoke(main, ["plan-geometric", "--map", str(obs_path),
                               "--start", start, "--goal", "9.9,9.9",
                               "--alpha", "0.5"])
    if res.exit_code == 0:
        pytest.skip("corner happened to be reachable on this world")
    assert res.exit_code in (1, 2)
    assert "error:" in res.output


def test_plan_geometric_bad_point_usage_error(world):
    _, obs_path = world
    res = runner.invoke(main, ["plan-geometric", "--map", str(obs_path),
                               "--start", "nope", "--goal", "1,1"])
    assert res.exit_code == 2
    assert "--start" in res.output


def test_plan_mpc_json_deterministic(world):
    _, obs_path = world
    start, goal = safe_points(obs_path)
    args = ["plan-mpc", "--map", str(obs_path), "--start", start,
            "--goal", goal, "--seed", "1"]
    a = runner.invoke(main, args)
    b = runner.invoke(main, args)
    assert a.exit_code == 0, a.output
    assert a.output == b.output
    doc = json.loads(a.output)
    assert doc["wall_time_ms"] == 0.0
    assert set(doc) >= {"states", "controls", "dt", "feasible", "alpha_used",
                        "iterations"}
    assert len(doc["states"]) == len(doc["controls"]) + 1


def test_render_golden_determinism(world, tmp_path):
    _, obs_path = world
    a = tmp_path / "a.ppm"
    b = tmp_path / "b.ppm"
    for out in (a, b):
        res = runner.invoke(main, ["render", "--map", str(obs_path),
                                   "--out", str(out), "--pixels-per-cell", "2"])
        assert res.exit_code == 0, res.output
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(b"P6\n80 80\n255\n")


def test_render_with_overlay(world, tmp_path):
    _, obs_path = world
    start, goal = safe_points(obs_path)
    wp = tmp_path / "path.txt"
    res = runner.invoke(main, ["plan-geometric", "--map", str(obs_path),
                               "--start", start, "--goal", goal,
                               "--out", str(wp)])
    assert res.exit_code == 0
    plain = tmp_path / "plain.ppm"
    with_path = tmp_path / "overlay.ppm"
    runner.invoke(main, ["render", "--map", str(obs_path), "--out", str(plain)])
    res = runner.invoke(main, ["render", "--map", str(obs_path),
                               "--out", str(with_path),
                               "--overlay-path", str(wp)])
    assert res.exit_code == 0, res.output
    assert plain.read_bytes() != with_path.read_bytes()


def test_unknown_config_field_exit_1(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("mpc:\n  horizon: 10\n")
    res = runner.invoke(main, ["gen-world", "--config", str(cfg),
                               "--out", str(tmp_path / "w.npz")])
    assert res.exit_code == 1
    assert "error:" in res.output and "mpc.horizon" in res.output


def test_bad_map_file_exit_1(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a map")
    res = runner.invoke(main, ["build-risk", "--map", str(bad),
                               "--out", str(tmp_path / "o.npz")])
    assert res.exit_code == 1
    assert "error:" in res.output


def test_simulate_runs_and_reports(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  size: 40\n"
                   "sim:\n  step_cap: 40\n  goal_distance: 5.0\n")
    res = runner.invoke(main, ["simulate", "--config", str(cfg), "--seed", "2"])
    assert res.exit_code in (0, 3), res.output
    assert "success=" in res.output
    assert "wall_time_ms=0.0" in res.output


def test_monte_carlo_csv_deterministic(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  size: 40\n"
                   "sim:\n  step_cap: 30\n  goal_distance: 5.0\n")
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        agg = tmp_path / (name + ".json")
        res = runner.invoke(main, ["monte-carlo", "--config", str(cfg),
                                   "--runs", "2", "--alphas", "0.3,0.7",
                                   "--seed", "5", "--out", str(out),
                                   "--aggregate-out", str(agg)])
        assert res.exit_code == 0, res.output
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    doc = json.loads((tmp_path / "a.csv.json").read_text())
    assert [a["alpha"] for a in doc["aggregates"]] == [0.3, 0.7]
