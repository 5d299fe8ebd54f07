import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stepnav.errors import InvalidArgumentError
from stepnav.dynamics import (DIFF_DRIVE, GENERAL6, DynamicsModel, Trajectory,
                              linearize, rollout, rollout_batch, step,
                              wrap_angle)


def test_wrap_angle_range_and_branch():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert abs(wrap_angle(3 * math.pi / 2) + math.pi / 2) < 1e-12
    arr = wrap_angle(np.array([0.0, 4 * math.pi, -7.0]))
    assert np.all(arr > -math.pi) and np.all(arr <= math.pi)


def test_model_validation():
    with pytest.raises(InvalidArgumentError):
        DynamicsModel(variant="hovercraft")
    with pytest.raises(InvalidArgumentError):
        DynamicsModel(dt=0.0)
    with pytest.raises(InvalidArgumentError):
        DynamicsModel(mix=1.5)
    with pytest.raises(InvalidArgumentError):
        DynamicsModel(a_max=(0.0, 1, 1))


def test_dimensions():
    assert DynamicsModel(variant=DIFF_DRIVE).nx == 4
    assert DynamicsModel(variant=DIFF_DRIVE).nu == 2
    assert DynamicsModel(variant=GENERAL6).nx == 6
    assert DynamicsModel(variant=GENERAL6).nu == 3


def test_diff_drive_step_hand_values():
    # x=(0,0,0,1), u=(0.5, 0.2), dt=0.1: p += dt*v*dir, th += dt*v_th, v += dt*a
    model = DynamicsModel(dt=0.1)
    x1 = step(model, [0.0, 0.0, 0.0, 1.0], [0.5, 0.2])
    np.testing.assert_allclose(x1, [0.1, 0.0, 0.02, 1.05], atol=1e-15)
    # heading 90 degrees moves along +y
    x2 = step(model, [0.0, 0.0, math.pi / 2, 1.0], [0.0, 0.0])
    np.testing.assert_allclose(x2[:2], [0.0, 0.1], atol=1e-15)


def test_general6_step_hand_values():
    model = DynamicsModel(variant=GENERAL6, dt=0.5)
    x = [0.0, 0.0, 0.0, 1.0, 0.5, 0.2]
    x1 = step(model, x, [0.1, 0.2, 0.3])
    np.testing.assert_allclose(
        x1, [0.5, 0.25, 0.1, 1.05, 0.6, 0.35], atol=1e-15)


def test_mixing_constant_couples_heading():
    model = DynamicsModel(dt=0.1, mix=0.5)
    x1 = step(model, [0, 0, 0, 1.0], [0.0, 0.0])
    # theta_dot = mix * v_x + (1 - mix) * v_theta = 0.5
    assert abs(x1[2] - 0.05) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([DIFF_DRIVE, GENERAL6]), st.integers(0, 10 ** 6))
def test_linearize_matches_finite_differences(variant, seed):
    rng = np.random.default_rng(seed)
    model = DynamicsModel(variant=variant, dt=0.2, mix=float(rng.uniform(0, 1)))
    x = rng.uniform(-1, 1, model.nx)
    x[2] = rng.uniform(-2.5, 2.5)  # keep away from the wrap discontinuity
    u = rng.uniform(-0.5, 0.5, model.nu)
    A, B = linearize(model, x, u)
    h = 1e-6
    for i in range(model.nx):
        dx = np.zeros(model.nx)
        dx[i] = h
        fd = (step(model, x + dx, u) - step(model, x - dx, u)) / (2 * h)
        np.testing.assert_allclose(A[:, i], fd, atol=2e-6)
    for i in range(model.nu):
        du = np.zeros(model.nu)
        du[i] = h
        fd = (step(model, x, u + du) - step(model, x, u - du)) / (2 * h)
        np.testing.assert_allclose(B[:, i], fd, atol=2e-6)


def test_rollout_exactness_and_shapes():
    model = DynamicsModel(dt=0.25)
    rng = np.random.default_rng(3)
    x0 = np.array([1.0, -2.0, 0.3, 0.5])
    controls = rng.uniform(-1, 1, (12, 2))
    traj = rollout(model, x0, controls)
    assert traj.states.shape == (13, 4)
    assert traj.horizon == 12
    x = x0
    for k in range(12):
        x = step(model, x, controls[k])
        np.testing.assert_allclose(traj.states[k + 1], x, atol=0)


def test_rollout_batch_matches_sequential():
    for variant in (DIFF_DRIVE, GENERAL6):
        model = DynamicsModel(variant=variant, dt=0.2, mix=0.3)
        rng = np.random.default_rng(8)
        x0 = rng.uniform(-1, 1, model.nx)
        batch = rng.uniform(-1, 1, (5, 7, model.nu))
        states = rollout_batch(model, x0, batch)
        for i in range(5):
            ref = rollout(model, x0, batch[i]).states
            np.testing.assert_allclose(states[i], ref, atol=1e-14)


def test_control_bounds():
    model = DynamicsModel(a_max=(2.0, 1, 1), v_max=(1.5, 1.5, 0.9))
    lo, hi = model.control_bounds()
    np.testing.assert_allclose(lo, [-2.0, -0.9])
    np.testing.assert_allclose(hi, [2.0, 0.9])
    model6 = DynamicsModel(variant=GENERAL6, a_max=(1.0, 2.0, 3.0))
    lo6, hi6 = model6.control_bounds()
    np.testing.assert_allclose(hi6, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(lo6, -hi6)


def test_trajectory_export_roundtrip(tmp_path):
    import json
    model = DynamicsModel(dt=0.2)
    traj = rollout(model, [0, 0, 0, 1.0], np.full((3, 2), 0.1))
    p = tmp_path / "traj.json"
    traj.save(p)
    doc = json.loads(p.read_text())
    assert doc["dt"] == 0.2
    np.testing.assert_allclose(np.array(doc["states"]), traj.states)
    np.testing.assert_allclose(np.array(doc["controls"]), traj.controls)
    assert Trajectory(np.array(doc["states"]), np.array(doc["controls"]),
                      doc["dt"]).horizon == 3
