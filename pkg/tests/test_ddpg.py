from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import adam_reference, mlp_reference
from scipy.stats import chisquare

from dsrl import ddpg, envs
from dsrl.adversary import NoisePrior
from dsrl.cbf import SafetyFilter, make_barriers
from dsrl.ddpg import AgentNets, OUNoise, ReplayBuffer, Transition
from dsrl.envs import make_env
from dsrl.errors import NumericError
from dsrl.net import MLPParams, init_mlp, mlp_forward


def make_ctx(horizon=200, batch_size=64, **model_kw):
    m = make_env("dubins1", horizon=horizon, **model_kw)
    cfg = ddpg.DDPGConfig(hidden=(16, 16), batch_size=batch_size)
    return ddpg.EpisodeContext(m, SafetyFilter(m, make_barriers(m)), NoisePrior("gaussian", 3, std=0.1), 8, cfg)


def small_nets(seed=0, gamma=0.99):
    return AgentNets.create(3, 3, (-np.ones(3), np.ones(3)), np.random.default_rng(seed), (16, 16), 0.005, gamma)


def params_equal(a: MLPParams, b: MLPParams) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def layers_of(p: MLPParams):
    return list(zip(p.weights, p.biases))


# ----------------------------------------------------------------- buffer


def fill(buf, k, r):
    for i in range(k):
        buf.add(Transition(r.normal(size=3), r.normal(size=3), r.normal(size=3), float(i), r.normal(size=3), r.normal(size=3)))


def test_buffer_ring_and_size(rng):
    buf = ReplayBuffer(5, 3, 3, 3)
    fill(buf, 3, rng)
    assert len(buf) == 3
    assert set(buf.sample(rng, 200)["R"]) <= {0.0, 1.0, 2.0}
    fill(buf, 4, rng)
    assert len(buf) == 5
    # the two oldest entries (R=0, 1) were overwritten by R=0..3 of the second fill
    assert sorted(buf.R.tolist()) == [0.0, 1.0, 2.0, 2.0, 3.0]


def test_buffer_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1, 1, 1)
    buf = ReplayBuffer(2, 1, 1, 1)
    with pytest.raises(ValueError):
        buf.sample(rng, 1)
    with pytest.raises(NumericError):
        buf.add(Transition(np.zeros(1), np.zeros(1), np.zeros(1), float("nan"), np.zeros(1), np.zeros(1)))


def test_buffer_sampling_is_uniform(rng):
    buf = ReplayBuffer(100, 1, 1, 1)
    for i in range(50):
        buf.add(Transition(np.zeros(1), np.zeros(1), np.zeros(1), float(i), np.zeros(1), np.zeros(1)))
    idx = buf.sample_indices(rng, 100_000)
    assert idx.max() < 50
    counts = np.bincount(idx, minlength=50)
    assert chisquare(counts).pvalue > 1e-3


# --------------------------------------------------------------------- OU


def test_zero_sigma_gives_actor_output():
    nets = small_nets()
    x = np.array([0.3, -0.2, 1.0])
    a = ddpg.select_action(nets, x, OUNoise(0.15, 0.0, np.zeros(3)), np.random.default_rng(0))
    np.testing.assert_array_equal(a, mlp_forward(nets.actor, x)[0])


def test_zero_actor_returns_clamped_noise_state():
    nets = small_nets()
    for W, b in zip(nets.actor.weights, nets.actor.biases):
        W[...] = 0.0
        b[...] = 0.0
    n = np.array([0.4, -2.0, 3.0])
    noise = OUNoise(0.0, 0.0, np.zeros(3), state=n)
    a = ddpg.select_action(nets, np.ones(3), noise, np.random.default_rng(0))
    np.testing.assert_array_equal(a, np.clip(n, -1, 1))


def test_ou_without_reversion_is_gaussian_walk():
    noise = OUNoise(0.0, 0.3, np.zeros(1))
    r = np.random.default_rng(3)
    path = np.array([noise.sample(r)[0] for _ in range(10_000)])
    inc = np.diff(np.concatenate([[0.0], path]))
    assert abs(inc.mean()) < 4 * 0.3 / 100
    assert inc.std() == pytest.approx(0.3, rel=0.03)
    assert abs(np.corrcoef(inc[:-1], inc[1:])[0, 1]) < 0.04


def test_ou_validation_and_reset():
    with pytest.raises(ValueError):
        OUNoise(-0.1, 0.2, np.zeros(2))
    o = OUNoise(0.15, 0.2, np.ones(2))
    o.sample(np.random.default_rng(0))
    o.reset()
    np.testing.assert_array_equal(o.state, np.ones(2))


# ----------------------------------------------------------------- critic


def test_critic_target_examples(rng):
    nets = small_nets(gamma=0.0)
    R = rng.normal(size=4)
    np.testing.assert_array_equal(ddpg.critic_target(nets, R, rng.normal(size=(4, 3)), np.zeros(4)), R)
    nets = small_nets()
    np.testing.assert_array_equal(ddpg.critic_target(nets, R, rng.normal(size=(4, 3)), np.ones(4)), R)


def test_critic_target_matches_composition(rng):
    nets = small_nets(3)
    lo, hi = nets.actor.output_low, nets.actor.output_high
    for _ in range(20):
        s2 = rng.normal(size=3)
        R, done = float(rng.normal()), float(rng.random() < 0.3)
        mu = mlp_reference(layers_of(nets.target_actor), s2, output="scaled_tanh", low=lo, high=hi)
        q = mlp_reference(layers_of(nets.target_critic), np.concatenate([s2, mu]))[0]
        y = ddpg.critic_target(nets, np.array([R]), s2[None, :], np.array([done]))[0]
        assert y == pytest.approx(R + nets.gamma * (1 - done) * q, rel=1e-12, abs=1e-12)


def linear_net(W, b, low=None, high=None, out="identity"):
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    return MLPParams([W.shape[1], W.shape[0]], [W], [np.asarray(b, dtype=np.float64)], "tanh", out, low, high)


def scalar_nets(gamma=0.9):
    actor = linear_net([[0.5]], [0.1])
    critic = linear_net([[0.3, -0.7]], [0.2])
    return AgentNets(actor, critic, linear_net([[0.2]], [0.0]), linear_net([[1.0, 0.5]], [-0.1]), 0.01, gamma)


def test_critic_step_hand_gradient():
    nets = scalar_nets()
    s, a, R, s2 = 1.5, -0.4, 0.8, 2.0
    mu2 = 0.2 * s2
    y = R + 0.9 * (1.0 * s2 + 0.5 * mu2 - 0.1)
    q = 0.3 * s - 0.7 * a + 0.2
    e = q - y
    grad_W = np.array([[2 * e * s, 2 * e * a]])
    grad_b = np.array([2 * e])
    batch = {"s": [[s]], "a_R": [[a]], "R": np.array([R]), "s_next": [[s2]], "done": np.zeros(1)}
    loss = ddpg.update_critic(nets, batch, 1e-3)
    assert loss == pytest.approx(e * e, rel=1e-14)
    np.testing.assert_allclose(nets.critic.weights[0], adam_reference([[0.3, -0.7]], [grad_W], 1e-3)[-1], rtol=1e-14)
    np.testing.assert_allclose(nets.critic.biases[0], adam_reference([0.2], [grad_b], 1e-3)[-1], rtol=1e-14)


def test_critic_step_with_zero_error_is_a_no_op(rng):
    nets = small_nets(gamma=0.0)
    s, a = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    q = mlp_forward(nets.critic, np.hstack([s, a]))[0][:, 0]
    before = nets.critic.copy()
    ddpg.update_critic(nets, {"s": s, "a_R": a, "R": q, "s_next": s, "done": np.zeros(8)}, 1e-3)
    for p, p0 in zip(nets.critic.parameters(), before.parameters()):
        np.testing.assert_allclose(p, p0, atol=1e-12)


def test_critic_loss_decreases_on_frozen_batch(rng):
    nets = small_nets(1)
    batch = {"s": rng.normal(size=(32, 3)), "a_R": rng.uniform(-1, 1, (32, 3)), "R": rng.normal(size=32),
             "s_next": rng.normal(size=(32, 3)), "done": np.zeros(32)}
    losses = [ddpg.update_critic(nets, batch, 1e-3) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_critic_uses_selected_action_column(rng):
    batch = {"s": rng.normal(size=(4, 3)), "a": rng.normal(size=(4, 3)), "a_R": rng.normal(size=(4, 3)),
             "R": rng.normal(size=4), "s_next": rng.normal(size=(4, 3)), "done": np.zeros(4)}
    n1, n2 = small_nets(), small_nets()
    ddpg.update_critic(n1, batch, 1e-3, "a_R")
    ddpg.update_critic(n2, {**batch, "a_R": batch["a"]}, 1e-3, "a_R")
    n3 = small_nets()
    ddpg.update_critic(n3, batch, 1e-3, "a")
    assert params_equal(n2.critic, n3.critic) and not params_equal(n1.critic, n3.critic)


# ------------------------------------------------------------------ actor


def test_actor_ignores_action_blind_critic(rng):
    nets = small_nets()
    nets.critic.weights[0][:, 3:] = 0.0
    before = nets.actor.copy()
    ddpg.update_actor(nets, {"s": rng.normal(size=(8, 3))}, 1e-3)
    assert params_equal(nets.actor, before)


def test_actor_step_hand_chain():
    nets = scalar_nets()
    s = np.array([[1.5], [-0.5]])
    # Q = 0.3 s - 0.7 mu + 0.2 with mu = th s + c; ascend mean Q
    grad_th = -np.mean(-0.7 * s[:, 0])
    grad_c = -(-0.7)
    obj = ddpg.update_actor(nets, {"s": s}, 1e-3)
    assert obj == pytest.approx(np.mean(0.3 * s[:, 0] - 0.7 * (0.5 * s[:, 0] + 0.1) + 0.2), rel=1e-14)
    np.testing.assert_allclose(nets.actor.weights[0], adam_reference([[0.5]], [np.array([[grad_th]])], 1e-3)[-1], rtol=1e-14)
    np.testing.assert_allclose(nets.actor.biases[0], adam_reference([0.1], [np.array([grad_c])], 1e-3)[-1], rtol=1e-14)


def test_actor_ascends_frozen_critic(rng):
    nets = small_nets(2)
    batch = {"s": rng.normal(size=(32, 3))}
    objs = [ddpg.update_actor(nets, batch, 1e-4) for _ in range(21)]
    assert all(b >= a - 1e-12 for a, b in zip(objs, objs[1:]))
    assert objs[-1] > objs[0]


# ------------------------------------------------------------ soft update


def test_soft_update_examples():
    nets = small_nets()
    for p in nets.actor.parameters() + nets.critic.parameters():
        p[...] = 1.0
    for p in nets.target_actor.parameters() + nets.target_critic.parameters():
        p[...] = 3.0
    ddpg.soft_update(nets, 0.0)
    assert all(np.all(p == 3.0) for p in nets.target_actor.parameters())
    ddpg.soft_update(nets, 0.5)
    assert all(np.all(p == 2.0) for p in nets.target_actor.parameters() + nets.target_critic.parameters())
    ddpg.soft_update(nets, 1.0)
    assert params_equal(nets.target_actor, nets.actor) and params_equal(nets.target_critic, nets.critic)


@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_soft_update_is_convex(seed, tau):
    r = np.random.default_rng(seed)
    nets = AgentNets.create(2, 1, (-np.ones(1), np.ones(1)), r, (4,), 0.5, 0.9)
    for p in nets.actor.parameters():
        p += r.normal(size=p.shape)
    old = nets.target_actor.copy()
    ddpg.soft_update(nets, tau)
    for t, o, live in zip(nets.target_actor.parameters(), old.parameters(), nets.actor.parameters()):
        lo, hi = np.minimum(o, live), np.maximum(o, live)
        assert np.all(t >= lo - 1e-15) and np.all(t <= hi + 1e-15)


def test_agent_validation():
    a = init_mlp([3, 4, 3], np.random.default_rng(0))
    c = init_mlp([6, 4, 1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        AgentNets(a, c, init_mlp([3, 5, 3], np.random.default_rng(0)), c.copy())
    with pytest.raises(ValueError):
        AgentNets(a, c, a.copy(), c.copy(), tau=0.0)


# ---------------------------------------------------------------- rollout


def test_horizon_one_matches_composed_chain():
    ctx = make_ctx(horizon=1)
    nets = small_nets(4)
    omega = np.array([0.05, -0.1, 0.02])
    r1 = np.random.default_rng(11)
    traj, trs = ddpg.run_episode(nets, ctx, omega, r1, "dsrl", noise=OUNoise(0.15, 0.2, np.zeros(3)))
    # replay the same draws by hand
    r2 = np.random.default_rng(11)
    w_exec = ctx.prior.sample(r2)
    a = ddpg.select_action(nets, ctx.model.x0, OUNoise(0.15, 0.2, np.zeros(3)), r2)
    offset = ctx.prior.sample(r2, 8).mean(axis=0)
    res = ctx.filt.rectify(ctx.model.x0, a, omega + offset - ctx.prior.expectation, grads=True)
    x1 = envs.step(ctx.model, ctx.model.x0, res.u, w_exec)
    assert len(trs) == 1
    np.testing.assert_array_equal(traj.actions_rl[0], a)
    np.testing.assert_array_equal(traj.actions_rect[0], res.u)
    np.testing.assert_array_equal(traj.states[1], x1)
    np.testing.assert_array_equal(traj.du_domega[0], res.du_domega)
    assert traj.rewards[0] == envs.reward(ctx.model, x1, res.u)


def test_baseline_assembles_at_sample_mean():
    ctx = make_ctx(horizon=3)
    traj, _ = ddpg.run_episode(small_nets(), ctx, np.full(3, 0.2), np.random.default_rng(5), "baseline_deterministic")
    r = np.random.default_rng(5)
    ctx.prior.sample(r)
    expected = []
    for _ in range(3):
        expected.append(ctx.prior.sample(r, 8).mean(axis=0))
    np.testing.assert_array_equal(np.array(traj.omega_asm), np.array(expected))
    assert traj.du_domega == []


def test_eval_mode_is_deterministic():
    ctx = make_ctx(horizon=40)
    nets = small_nets(6)
    w = np.array([0.1, -0.2, 0.0])
    t1, _ = ddpg.run_episode(nets, ctx, w, np.random.default_rng(1), "eval")
    t2, _ = ddpg.run_episode(nets, ctx, w, np.random.default_rng(999), "eval")
    assert np.array(t1.states).tobytes() == np.array(t2.states).tobytes()
    assert all(np.array_equal(o, w) for o in t1.omega_exec + t1.omega_asm)


def test_stored_transitions_resimulate(rng):
    ctx = make_ctx(horizon=30)
    ctx.ddpg.reward_scale = 0.5
    buf = ReplayBuffer(1000, 3, 3, 3)
    nets = small_nets(8)
    ddpg.run_episode(nets, ctx, np.zeros(3), rng, "dsrl", buffer=buf, noise=OUNoise(0.15, 0.2, np.zeros(3)))
    for i in range(len(buf)):
        x1 = envs.step(ctx.model, buf.s[i], buf.a_R[i], buf.omega0[i])
        assert x1.tobytes() == buf.s_next[i].tobytes()
        assert buf.R[i] == 0.5 * envs.reward(ctx.model, x1, buf.a_R[i])


def test_goal_terminates_episode():
    ctx = make_ctx(horizon=50, x0=[3.95, 4.0, 0.0], goal_tol=0.1)
    traj, trs = ddpg.run_episode(small_nets(), ctx, np.zeros(3), np.random.default_rng(0), "eval")
    assert traj.reached_goal and traj.length == 1 and trs[-1].done


def test_unknown_mode():
    with pytest.raises(ValueError):
        ddpg.run_episode(small_nets(), make_ctx(horizon=1), np.zeros(3), np.random.default_rng(0), "greedy")


# ------------------------------------------------------------------ train


def test_warm_up_gating_and_single_adversary_step():
    ctx = make_ctx(horizon=2, batch_size=64)
    ctx.ddpg.hidden = (16, 16)
    res = ddpg.train(ctx, episodes=1, seed=3, mode="dsrl")
    ref = AgentNets.create(3, 3, (ctx.model.u_low, ctx.model.u_high), np.random.default_rng(3), (16, 16))
    assert params_equal(res.nets.actor, ref.actor) and params_equal(res.nets.critic, ref.critic)
    assert params_equal(res.nets.target_critic, ref.target_critic)
    rec = res.metrics[0]
    assert rec["steps"] == 2 and rec["critic_loss"] == 0.0
    assert rec["omega"] != rec["omega_next"]
    assert np.linalg.norm(res.omega - res.ball.center) <= res.ball.radius + 1e-12


def test_baseline_keeps_nominal_omega():
    ctx = make_ctx(horizon=5)
    res = ddpg.train(ctx, episodes=2, seed=0, mode="baseline_deterministic")
    np.testing.assert_array_equal(res.omega, ctx.prior.expectation)
    with pytest.raises(ValueError):
        ddpg.train(ctx, episodes=1, seed=0, mode="eval")


def test_train_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        ctx = make_ctx(horizon=30, batch_size=16)
        ddpg.train(ctx, episodes=4, seed=21, mode="dsrl", out_dir=tmp_path / str(k), checkpoint_every=2)
        outs.append((tmp_path / str(k) / "metrics.jsonl").read_bytes())
    assert outs[0] == outs[1]
    files = sorted(p.name for p in (tmp_path / "0").iterdir())
    assert files == [
        "checkpoint_00002.json", "checkpoint_00004.json", "final.json", "metrics.jsonl", "timing.jsonl",
        "trajectory_00002.csv", "trajectory_00004.csv",
    ]


def test_checkpoint_round_trip(tmp_path, rng):
    ctx = make_ctx(horizon=1)
    nets = small_nets(9)
    ball = ddpg.build_ball(ctx.prior, rng, 0.3, None)
    w = np.array([0.1, 0.0, -0.1])
    ddpg.save_checkpoint(tmp_path / "c.json", nets, w, ball, ctx.model, "dsrl", {"seed": 4})
    back, meta = ddpg.load_checkpoint(tmp_path / "c.json")
    assert params_equal(back.actor, nets.actor) and params_equal(back.target_critic, nets.target_critic)
    assert meta["omega"] == w.tolist() and meta["mode"] == "dsrl" and meta["seed"] == 4
    assert meta["ball_radius"] == 0.3 and meta["env"] == "dubins1"


def test_build_ball_radius_switch(rng):
    prior = NoisePrior("gaussian", 2, std=0.1)
    assert ddpg.build_ball(prior, rng, 0.3, None).radius == 0.3
    b = ddpg.build_ball(prior, rng, 0.3, 0.05)
    # 0.05 plus the mean norm of a 2-D Gaussian with std 0.1 (~0.125)
    assert b.radius == pytest.approx(0.05 + 0.1 * np.sqrt(np.pi / 2), rel=0.05)
