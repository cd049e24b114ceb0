from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_diff, euler_rollout

from dsrl import envs
from dsrl.envs import Trajectory, make_env
from dsrl.errors import NumericError, ShapeError, SingularityError

NAMES = ("dubins1", "dubins2", "quad")


def test_dubins1_step_examples():
    m = make_env("dubins1", dt=0.1)
    np.testing.assert_allclose(envs.step(m, [0, 0, 0], [1, 0, 0], np.zeros(3)), [0.1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(envs.step(m, [0, 0, math.pi / 2], [1, 0, 0], np.zeros(3)), [0, 0.1, math.pi / 2], atol=1e-15)


def test_dubins1_rest_without_input():
    m = make_env("dubins1")
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(envs.step(m, x, np.zeros(3), np.zeros(3)), x)


def test_dubins2_two_step_hand_integration():
    m = make_env("dubins2", dt=0.1)
    x = np.zeros(6)
    u = np.array([1.0, 0.0, 0.0])
    x1 = envs.step(m, x, u, np.zeros(3))
    x2 = envs.step(m, x1, u, np.zeros(3))
    # velocity rises by dt*a each step; position lags one step behind
    np.testing.assert_allclose(x1, [0, 0, 0, 0.1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(x2, [0.01, 0, 0, 0.2, 0, 0], atol=1e-15)


def test_dubins2_block_structure():
    m = make_env("dubins2", dt=0.05)
    Fx, _, Fw = envs.step_grads(m, np.zeros(6), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(Fx[:3, :3], np.eye(3))
    np.testing.assert_array_equal(Fx[:3, 3:], 0.05 * np.eye(3))
    np.testing.assert_array_equal(Fx[3:, 3:], np.eye(3))
    np.testing.assert_array_equal(Fw, 0.05 * m.noise_matrix)


@pytest.mark.parametrize("name", ["dubins1", "quad"])
def test_noise_jacobian_is_dt_identity(name):
    m = make_env(name)
    _, _, Fw = envs.step_grads(m, m.x0, np.zeros(m.m), np.zeros(m.noise_dim))
    np.testing.assert_array_equal(Fw, m.dt * np.eye(m.n))


@pytest.mark.parametrize("name", NAMES)
def test_step_jacobians_match_finite_differences(name, rng):
    m = make_env(name)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=m.n) * 2
        u = rng.uniform(-1, 1, m.m)
        w = rng.normal(scale=0.3, size=m.noise_dim)
        Fx, Fu, Fw = envs.step_grads(m, x, u, w)
        for J, fd in (
            (Fx, central_diff(lambda z: envs.step(m, z, u, w), x)),
            (Fu, central_diff(lambda z: envs.step(m, x, z, w), u)),
            (Fw, central_diff(lambda z: envs.step(m, x, u, z), w)),
        ):
            worst = max(worst, np.max(np.abs(J - fd)) / max(1.0, np.max(np.abs(fd))))
    assert worst <= 1e-6


def test_dubins1_theta_column_at_zero_heading():
    m = make_env("dubins1")
    u = np.array([0.4, -0.7, 0.2])
    Fx, _, _ = envs.step_grads(m, np.zeros(3), u, np.zeros(3))
    np.testing.assert_allclose(Fx[:, 2], [m.dt * 0.7, m.dt * 0.4, 1.0], atol=1e-15)


def test_rewards():
    d1 = make_env("dubins1", reward_d=1.0, reward_s=0.1)
    assert envs.reward(d1, d1.xf, np.zeros(3)) == pytest.approx(-0.1)
    d2 = make_env("dubins2")
    assert envs.reward(d2, d2.xf, np.zeros(3)) == pytest.approx(-d2.reward_s)
    q = make_env("quad")
    assert envs.reward(q, np.array([0.0, 2.0, 0.0]), np.zeros(3)) == pytest.approx(-4.0)


@pytest.mark.parametrize("name", NAMES)
def test_reward_gradients(name, rng):
    m = make_env(name)
    gx, gu = envs.reward_grads(m, m.xf, np.zeros(m.m))
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gu, 0.0)
    for _ in range(20):
        x = rng.normal(size=m.n) * 3
        gx, _ = envs.reward_grads(m, x, np.zeros(m.m))
        fd = central_diff(lambda z: envs.reward(m, z, np.zeros(m.m)), x)[0]
        np.testing.assert_allclose(gx, fd, rtol=1e-6, atol=1e-7)


def test_dubins1_reward_gradient_ignores_heading():
    m = make_env("dubins1", reward_d=0.5)
    x = np.array([1.0, 2.0, 0.3])
    gx, _ = envs.reward_grads(m, x, np.zeros(3))
    np.testing.assert_allclose(gx, [-2 * 0.5 * (1 - 4), -2 * 0.5 * (2 - 4), 0.0])


def test_attitude_examples():
    T, th, ph = envs.recover_attitude([0.0, 0.0, 0.0])
    assert (T, th, ph) == (pytest.approx(9.81), 0.0, 0.0)
    with pytest.raises(SingularityError):
        envs.recover_attitude([0.0, 0.0, -9.81])


@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_attitude_round_trip(v):
    v = np.array(v)
    if np.linalg.norm(v + [0, 0, 9.81]) <= 1e-6:
        return
    T, th, ph = envs.recover_attitude(v)
    np.testing.assert_allclose(envs.attitude_to_virtual(T, th, ph), v, atol=1e-10)


@pytest.mark.parametrize("name", NAMES)
def test_replay_reproduces_states_bit_identically(name, rng):
    m = make_env(name)
    us = rng.uniform(-1, 1, (15, m.m))
    w = rng.normal(scale=0.1, size=m.noise_dim)
    xs = [m.x0]
    for u in us:
        xs.append(envs.step(m, xs[-1], u, w))
    ys = [m.x0]
    for u in us:
        ys.append(envs.step(m, ys[-1], u, w))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(xs, ys))
    ref = euler_rollout(m.f, m.g, m.noise_matrix, m.x0, us, w, m.dt)
    np.testing.assert_allclose(np.array(xs), np.array(ref), atol=1e-12)


def test_non_finite_step_raises():
    m = make_env("quad")
    with pytest.raises(NumericError):
        envs.step(m, np.array([np.inf, 0, 0]), np.zeros(3), np.zeros(3))


def test_model_validation():
    with pytest.raises(ValueError):
        make_env("dubins1", dt=0.0)
    with pytest.raises(ValueError):
        make_env("dubins1", horizon=0)
    with pytest.raises(ShapeError):
        make_env("dubins1", x0=[0.0, 0.0])
    with pytest.raises(ValueError):
        make_env("dubins1", u_low=[1.0, 1.0, 1.0], u_high=[0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        make_env("boat")


def test_goal_distance_uses_position():
    m = make_env("dubins2")
    x = m.xf.copy()
    x[2:] = [3.0, 1.0, 1.0, 1.0]
    assert m.goal_distance(x) == 0.0


def test_trajectory_csv_round_trip(tmp_path, rng):
    m = make_env("dubins1")
    traj = Trajectory(states=[m.x0], h_values=[1.0])
    for t in range(3):
        u = rng.uniform(-1, 1, 3)
        w = rng.normal(size=3)
        x = envs.step(m, traj.states[-1], u, w)
        traj.states.append(x)
        traj.actions_rl.append(u)
        traj.actions_rect.append(u * 0.5)
        traj.omega_exec.append(w)
        traj.rewards.append(envs.reward(m, x, u))
        traj.h_values.append(float(t))
    traj.write_csv(tmp_path / "t.csv", m)
    cols = envs.read_trajectory_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(cols["x1"], [s[1] for s in traj.states])
    np.testing.assert_array_equal(cols["u_r2"][:3], [a[2] for a in traj.actions_rect])
    assert math.isnan(cols["reward"][3])
    assert cols["h"].min() == traj.min_h()
    assert traj.episode_return() == pytest.approx(sum(traj.rewards))
