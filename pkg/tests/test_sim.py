import csv
import json

import numpy as np
import pytest

from stepnav.errors import InvalidArgumentError
from stepnav.risk import RISK_CAP
from stepnav.sim import (EpisodeResult, SimConfig, WorldSpec,
                         generate_random_world, monte_carlo, observe,
                         run_episode, sample_start_goal, write_results,
                         _episode_for_run)


def small_spec(**kw):
    defaults = dict(seed=0, size=40)
    defaults.update(kw)
    return WorldSpec(**defaults)


def test_world_spec_validation():
    with pytest.raises(InvalidArgumentError):
        WorldSpec(size=4)
    with pytest.raises(InvalidArgumentError):
        WorldSpec(resolution=0.0)


def test_world_deterministic_in_seed():
    a_true, a_obs = generate_random_world(small_spec())
    b_true, b_obs = generate_random_world(small_spec())
    for name in a_true.layers:
        np.testing.assert_array_equal(a_true.get_layer(name),
                                      b_true.get_layer(name))
    np.testing.assert_array_equal(a_obs.get_layer("risk_mu"),
                                  b_obs.get_layer("risk_mu"))
    c_true, _ = generate_random_world(small_spec(seed=1))
    assert not np.array_equal(a_true.get_layer("risk_mu"),
                              c_true.get_layer("risk_mu"))


def test_world_layers_and_ranges():
    true_map, observed = generate_random_world(small_spec())
    for name in ("elevation", "n_z", "risk_mu", "risk_sigma", "cvar"):
        assert true_map.has_layer(name)
    mu = true_map.get_layer("risk_mu")
    assert np.all((mu >= 0) & (mu <= RISK_CAP))
    # the true map is noise-free: sigma 0, cvar == mu
    assert np.all(true_map.get_layer("risk_sigma") == 0.0)
    np.testing.assert_array_equal(true_map.get_layer("cvar"), mu)
    # observed sigma equals the perception noise scale
    spec = small_spec()
    np.testing.assert_allclose(observed.get_layer("risk_sigma"),
                               spec.sigma_percep)


def test_world_contains_lethal_and_moderate_risk():
    mu = generate_random_world(small_spec())[0].get_layer("risk_mu")
    assert np.any(mu >= 0.99)          # lethal blobs
    assert np.any((mu > 0.3) & (mu < 0.9))  # moderate structures


def test_observe_noise_statistics():
    spec = small_spec(sigma_percep=0.1)
    true_map, observed = generate_random_world(spec)
    rng = np.random.default_rng(7)
    observe(true_map, observed, spec, rng)
    diff = (observed.get_layer("risk_mu")
            - true_map.get_layer("risk_mu"))
    # interior (unclamped) cells: mean ~ 0, std ~ sigma_percep
    mu_true = true_map.get_layer("risk_mu")
    interior = (mu_true > 0.3) & (mu_true < 0.7)
    if interior.sum() > 200:
        assert abs(diff[interior].mean()) < 0.03
        assert abs(diff[interior].std() - 0.1) < 0.03
    assert np.all(observed.get_layer("risk_mu") >= 0.0)
    assert np.all(observed.get_layer("risk_mu") <= RISK_CAP)


def test_observe_zero_noise_identity():
    spec = small_spec(sigma_percep=0.0)
    true_map, observed = generate_random_world(spec)
    observe(true_map, observed, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(observed.get_layer("risk_mu"),
                                  true_map.get_layer("risk_mu"))


def test_episode_lethal_start_rejected():
    spec = small_spec()
    world = generate_random_world(spec)
    mu = world[0].get_layer("risk_mu")
    r, c = np.argwhere(mu >= 0.95)[0]
    x, y = world[0].world_of(int(r), int(c))
    with pytest.raises(InvalidArgumentError):
        run_episode(world, (x, y), (1.0, 1.0), SimConfig(), world_spec=spec)


def test_episode_deterministic():
    row1 = _episode_for_run(3, 0, 0.5, small_spec(), SimConfig(step_cap=40))
    row2 = _episode_for_run(3, 0, 0.5, small_spec(), SimConfig(step_cap=40))
    for k in row1:
        if k != "wall_time_ms":
            assert row1[k] == row2[k], k


def test_episode_result_fields():
    row = _episode_for_run(1, 0, 0.5, small_spec(), SimConfig(step_cap=60))
    assert set(row) == {"run_id", "alpha", "seed", "success", "path_length_m",
                        "max_risk", "mean_cvar", "steps", "wall_time_ms",
                        "failure_reason"}
    assert row["steps"] >= 1
    assert row["path_length_m"] >= 0.0
    assert 0.0 <= row["max_risk"] <= RISK_CAP
    if row["success"]:
        assert row["failure_reason"] == ""


def test_sample_start_goal_respects_distance():
    spec = small_spec()
    cfg = SimConfig(goal_distance=5.0)
    rng = np.random.default_rng(0)
    for (s, g), _ in zip(sample_start_goal(spec, cfg, rng), range(5)):
        assert abs(np.hypot(g[0] - s[0], g[1] - s[1]) - 5.0) < 1e-9


def test_monte_carlo_rows_and_aggregates(tmp_path):
    cfg = SimConfig(step_cap=40)
    rows, aggs = monte_carlo(2, [0.3, 0.7], small_spec(), cfg, master_seed=0)
    assert len(rows) == 4
    assert {r["alpha"] for r in rows} == {0.3, 0.7}
    assert [a["alpha"] for a in aggs] == [0.3, 0.7]
    for a in aggs:
        assert a["runs"] == 2
        assert 0.0 <= a["success_rate"] <= 1.0
    # batch composition does not change individual results
    solo = _episode_for_run(0, 1, 0.7, small_spec(), cfg)
    match = next(r for r in rows if r["run_id"] == 1 and r["alpha"] == 0.7)
    for k in solo:
        if k != "wall_time_ms":
            assert solo[k] == match[k]

    rows_path = tmp_path / "rows.csv"
    agg_path = tmp_path / "agg.json"
    write_results(rows, aggs, rows_path, agg_path)
    with open(rows_path) as f:
        read = list(csv.DictReader(f))
    assert len(read) == 4
    doc = json.loads(agg_path.read_text())
    assert len(doc["aggregates"]) == 2


def test_monte_carlo_rejects_zero_runs():
    with pytest.raises(InvalidArgumentError):
        monte_carlo(0, [0.5], small_spec(), SimConfig())
