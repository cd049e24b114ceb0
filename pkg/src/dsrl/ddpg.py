"""DDPG with a CBF safety filter in the action path and an adversarial disturbance.

Training rollouts execute one disturbance draw per episode while the filter
is assembled at the adversary's current vector (plus the per-step sample
offsets of the expectation). The adversary is updated once per episode.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .adversary import (
    AdversaryState,
    AmbiguityBall,
    NoisePrior,
    estimate_radius,
    grad_loss_wrt_omega,
    loss_from_trajectory,
    pga_update,
    project,
)
from .cbf import SafetyFilter
from .envs import EnvModel, Trajectory
from .errors import NumericError
from .net import AdamState, Checkpoint, MLPParams, adam_step, blend_into, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

MODES = ("dsrl", "baseline_deterministic", "eval")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    a_R: np.ndarray
    R: float
    s_next: np.ndarray
    omega0: np.ndarray
    done: bool = False


class ReplayBuffer:
    """Fixed-capacity ring buffer stored as preallocated arrays."""

    def __init__(self, capacity: int, n: int, m: int, nw: int) -> None:
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, n))
        self.a = np.zeros((capacity, m))
        self.a_R = np.zeros((capacity, m))
        self.R = np.zeros(capacity)
        self.s_next = np.zeros((capacity, n))
        self.omega0 = np.zeros((capacity, nw))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        if not math.isfinite(tr.R):
            raise NumericError("non-finite reward in transition")
        i = self.cursor
        self.s[i], self.a[i], self.a_R[i] = tr.s, tr.a, tr.a_R
        self.R[i], self.s_next[i], self.omega0[i], self.done[i] = tr.R, tr.s_next, tr.omega0, float(tr.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {k: getattr(self, k)[idx] for k in ("s", "a", "a_R", "R", "s_next", "omega0", "done")}

    def sample(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        return self.batch(self.sample_indices(rng, batch))


@dataclass
class OUNoise:
    theta: float
    sigma: float
    mu: np.ndarray
    state: np.ndarray = None  # type: ignore[assignment]
    dt: float = 1.0

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        if not (math.isfinite(self.theta) and math.isfinite(self.sigma)) or self.theta < 0:
            raise ValueError("OU parameters must be finite with theta >= 0")
        self.state = self.mu.copy() if self.state is None else np.asarray(self.state, dtype=np.float64).copy()

    def reset(self) -> None:
        self.state = self.mu.copy()

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        dx = self.theta * (self.mu - self.state) * self.dt + self.sigma * math.sqrt(self.dt) * rng.standard_normal(self.mu.shape)
        self.state = self.state + dx
        return self.state.copy()


@dataclass
class AgentNets:
    actor: MLPParams
    critic: MLPParams
    target_actor: MLPParams
    target_critic: MLPParams
    tau: float = 0.005
    gamma: float = 0.99
    actor_opt: AdamState = None  # type: ignore[assignment]
    critic_opt: AdamState = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.actor.layer_sizes != self.target_actor.layer_sizes or self.critic.layer_sizes != self.target_critic.layer_sizes:
            raise ValueError("target networks must mirror the live networks")
        if not 0 < self.tau <= 1 or not 0 <= self.gamma <= 1:
            raise ValueError("need 0 < tau <= 1 and 0 <= gamma <= 1")
        if self.actor_opt is None:
            self.actor_opt = AdamState.zeros_like(self.actor)
        if self.critic_opt is None:
            self.critic_opt = AdamState.zeros_like(self.critic)

    @classmethod
    def create(cls, n: int, m: int, bounds, rng: np.random.Generator, hidden=(64, 64), tau=0.005, gamma=0.99) -> AgentNets:
        actor = init_mlp([n, *hidden, m], rng, "tanh", "scaled_tanh", bounds)
        critic = init_mlp([n + m, *hidden, 1], rng, "tanh", "identity")
        return cls(actor, critic, actor.copy(), critic.copy(), tau, gamma)


def select_action(nets: AgentNets, x, noise: OUNoise | None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Actor output plus one OU draw, clamped to the actor's output box."""
    a, _ = mlp_forward(nets.actor, x)
    if noise is not None:
        a = a + noise.sample(rng)
    if nets.actor.output_activation == "scaled_tanh":
        a = np.clip(a, nets.actor.output_low, nets.actor.output_high)
    return a


def _q(critic: MLPParams, s, a):
    out, cache = mlp_forward(critic, np.concatenate([s, a], axis=-1))
    return out[..., 0], cache


def critic_target(nets: AgentNets, R, s_next, done) -> np.ndarray:
    """y = R + gamma Q'(s', mu'(s')), or R on terminal transitions."""
    mu_next, _ = mlp_forward(nets.target_actor, s_next)
    q_next, _ = _q(nets.target_critic, s_next, mu_next)
    return np.asarray(R) + nets.gamma * (1.0 - np.asarray(done, dtype=np.float64)) * q_next


def update_critic(nets: AgentNets, batch: dict, lr: float, action_key: str = "a_R") -> float:
    """One Adam step on the mean squared Bellman error; returns the pre-step loss."""
    s, a = np.atleast_2d(batch["s"]), np.atleast_2d(batch[action_key])
    if s.shape[0] == 0:
        raise ValueError("empty minibatch")
    y = critic_target(nets, batch["R"], np.atleast_2d(batch["s_next"]), batch["done"])
    q, cache = _q(nets.critic, s, a)
    err = q - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise NumericError("non-finite critic loss")
    grads = mlp_backward(nets.critic, cache, (2.0 / len(err)) * err[:, None])
    adam_step(nets.critic, grads, nets.critic_opt, lr)
    return loss


def update_actor(nets: AgentNets, batch: dict, lr: float) -> float:
    """Deterministic policy gradient ascent on mean Q(s, mu(s)); returns the pre-step objective."""
    s = np.atleast_2d(batch["s"])
    if s.shape[0] == 0:
        raise ValueError("empty minibatch")
    a, a_cache = mlp_forward(nets.actor, s)
    q, q_cache = _q(nets.critic, s, a)
    obj = float(np.mean(q))
    if not math.isfinite(obj):
        raise NumericError("non-finite actor objective")
    n = s.shape[1]
    dq_dsa = mlp_backward(nets.critic, q_cache, np.full((len(q), 1), 1.0 / len(q))).input_grad
    # descend on -Q
    grads = mlp_backward(nets.actor, a_cache, -dq_dsa[:, n:])
    adam_step(nets.actor, grads, nets.actor_opt, lr)
    return obj


def soft_update(nets: AgentNets, tau: float | None = None) -> AgentNets:
    tau = nets.tau if tau is None else tau
    blend_into(nets.target_actor, nets.actor, tau)
    blend_into(nets.target_critic, nets.critic, tau)
    return nets


@dataclass
class DDPGConfig:
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_size: int = 100_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    critic_action_source: str = "rectified"
    reward_scale: float = 1.0


@dataclass
class EpisodeContext:
    """Everything a rollout needs besides the networks."""

    model: EnvModel
    filt: SafetyFilter
    prior: NoisePrior
    samples_per_step: int = 8
    ddpg: DDPGConfig = field(default_factory=DDPGConfig)


def run_episode(
    nets: AgentNets,
    ctx: EpisodeContext,
    omega,
    rng: np.random.Generator,
    mode: str,
    *,
    omega_exec=None,
    buffer: ReplayBuffer | None = None,
    noise: OUNoise | None = None,
    learn: bool = False,
    stats: dict | None = None,
) -> tuple[Trajectory, list[Transition]]:
    """Roll out one episode.

    ``dsrl``: the filter uses ``omega`` shifted by the per-step sample
    offsets; the executed disturbance is one prior draw for the episode
    (or ``omega_exec``). ``baseline_deterministic``: the filter uses the
    per-step sample mean. ``eval``: the filter uses ``omega`` exactly, the
    executed disturbance is ``omega_exec`` and no exploration noise is added.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    model, filt, prior, cfg = ctx.model, ctx.filt, ctx.prior, ctx.ddpg
    omega = np.asarray(omega, dtype=np.float64)
    center = prior.expectation
    if omega_exec is None:
        omega_exec = omega if mode == "eval" else prior.sample(rng)
    omega_exec = np.asarray(omega_exec, dtype=np.float64)
    grads = mode == "dsrl"
    if noise is not None:
        noise.reset()
    x = model.x0.copy()
    traj = Trajectory(states=[x], h_values=[filt.h_value(x)])
    transitions: list[Transition] = []
    action_key = "a_R" if cfg.critic_action_source == "rectified" else "a"
    for _ in range(model.horizon):
        try:
            if mode == "eval":
                a = select_action(nets, x, None)
                asm = omega
            else:
                a = select_action(nets, x, noise, rng)
                offset = prior.sample(rng, ctx.samples_per_step).mean(axis=0)
                asm = omega + offset - center if mode == "dsrl" else offset
            res = filt.rectify(x, a, asm, grads=grads)
            x_next = envs.step(model, x, res.u, omega_exec)
            r = envs.reward(model, x_next, res.u)
        except NumericError as exc:
            traj.failed = str(exc)
            log.warning("episode aborted: %s", exc)
            break
        done = model.goal_distance(x_next) <= model.goal_tol
        tr = Transition(x, a, res.u, r, x_next, omega_exec, done)
        transitions.append(tr)
        traj.states.append(x_next)
        traj.actions_rl.append(a)
        traj.actions_rect.append(res.u)
        traj.rewards.append(r)
        traj.omega_exec.append(omega_exec)
        traj.omega_asm.append(np.asarray(asm, dtype=np.float64))
        traj.h_values.append(filt.h_value(x_next))
        traj.fallbacks += int(res.fallback)
        if grads:
            traj.du_domega.append(res.du_domega)
            traj.du_dx.append(res.du_dx)
        if buffer is not None:
            buffer.add(Transition(x, a, res.u, cfg.reward_scale * r, x_next, omega_exec, done))
            if learn and len(buffer) >= cfg.batch_size:
                batch = buffer.sample(rng, cfg.batch_size)
                closs = update_critic(nets, batch, cfg.critic_lr, action_key)
                update_actor(nets, batch, cfg.actor_lr)
                soft_update(nets)
                if stats is not None:
                    stats["critic_loss"] = stats.get("critic_loss", 0.0) + closs
                    stats["updates"] = stats.get("updates", 0) + 1
        x = x_next
        if done:
            traj.reached_goal = True
            break
    return traj, transitions


@dataclass
class TrainResult:
    nets: AgentNets
    omega: np.ndarray
    metrics: list[dict]
    ball: AmbiguityBall


def build_ball(prior: NoisePrior, rng: np.random.Generator, rho_d: float, wasserstein_rho: float | None, n_samples: int = 1000) -> AmbiguityBall:
    """Ball around the prior mean; the radius is set directly unless a Wasserstein radius is given."""
    if wasserstein_rho is None:
        return AmbiguityBall(prior.expectation, rho_d)
    return AmbiguityBall(prior.expectation, estimate_radius(prior.sample(rng, n_samples), wasserstein_rho))


def train(
    ctx: EpisodeContext,
    *,
    episodes: int,
    seed: int,
    mode: str = "dsrl",
    rho_d: float = 0.3,
    wasserstein_rho: float | None = None,
    adversary_step: float = 0.01,
    adversary_decay: float = 0.999,
    omega_init: str = "random",
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    meta: dict | None = None,
) -> TrainResult:
    """Train in ``dsrl`` or ``baseline_deterministic`` mode.

    With ``out_dir`` the run writes metrics.jsonl (deterministic),
    timing.jsonl (wall clock), checkpoints and trajectory CSVs.
    """
    if mode not in ("dsrl", "baseline_deterministic"):
        raise ValueError(f"train mode must be dsrl or baseline_deterministic, got {mode!r}")
    model, cfg = ctx.model, ctx.ddpg
    rng = np.random.default_rng(seed)
    nets = AgentNets.create(model.n, model.m, (model.u_low, model.u_high), rng, cfg.hidden, cfg.tau, cfg.gamma)
    buffer = ReplayBuffer(cfg.buffer_size, model.n, model.m, model.noise_dim)
    noise = OUNoise(cfg.ou_theta, cfg.ou_sigma, np.zeros(model.m))
    ball = build_ball(ctx.prior, rng, rho_d, wasserstein_rho)
    if omega_init not in ("random", "center"):
        raise ValueError(f"omega_init must be 'random' or 'center', got {omega_init!r}")
    start = ctx.prior.expectation
    if mode == "dsrl" and omega_init == "random":
        # own stream, so both modes share the main one
        start = project(ctx.prior.sample(np.random.default_rng([seed, 1])), ball)
    adv = AdversaryState(start, adversary_step, 0, adversary_decay)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
        (out / "timing.jsonl").write_text("")
    metrics: list[dict] = []
    for ep in range(episodes):
        t0 = time.perf_counter()
        stats: dict = {}
        traj, _ = run_episode(nets, ctx, adv.omega, rng, mode, buffer=buffer, noise=noise, learn=True, stats=stats)
        loss = loss_from_trajectory(traj, cfg.gamma)
        omega_used = adv.omega.copy()
        if mode == "dsrl" and traj.failed is None:
            adv = pga_update(adv, grad_loss_wrt_omega(traj, model, cfg.gamma), ball)
        rec = {
            "episode": ep,
            "return": traj.episode_return(),
            "loss": loss,
            "min_h": traj.min_h(),
            "omega": omega_used.tolist(),
            "omega_next": adv.omega.tolist(),
            "omega_dist": float(np.linalg.norm(adv.omega - ball.center)),
            "fallbacks": traj.fallbacks,
            "steps": traj.length,
            "reached_goal": traj.reached_goal,
            "critic_loss": stats.get("critic_loss", 0.0) / max(1, stats.get("updates", 0)),
            "failed": traj.failed,
        }
        metrics.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
            with open(out / "timing.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"episode": ep, "wall_time": time.perf_counter() - t0}) + "\n")
            if checkpoint_every and (ep + 1) % checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{ep + 1:05d}.json", nets, adv.omega, ball, model, mode, meta)
                traj.write_csv(out / f"trajectory_{ep + 1:05d}.csv", model)
        if traj.failed is not None and not math.isfinite(traj.episode_return()):
            raise NumericError(f"episode {ep}: {traj.failed}")
    if out is not None:
        save_checkpoint(out / "final.json", nets, adv.omega, ball, model, mode, meta)
    return TrainResult(nets, adv.omega, metrics, ball)


def save_checkpoint(path, nets: AgentNets, omega, ball: AmbiguityBall, model: EnvModel, mode: str, meta: dict | None = None) -> None:
    info = {
        "env": model.name,
        "n": model.n,
        "m": model.m,
        "mode": mode,
        "omega": np.asarray(omega).tolist(),
        "ball_center": ball.center.tolist(),
        "ball_radius": ball.radius,
        "gamma": nets.gamma,
        "tau": nets.tau,
    }
    info.update(meta or {})
    Checkpoint(
        {"actor": nets.actor, "critic": nets.critic, "target_actor": nets.target_actor, "target_critic": nets.target_critic},
        info,
    ).dump(path)


def load_checkpoint(path) -> tuple[AgentNets, dict]:
    ck = Checkpoint.load(path)
    nets = AgentNets(
        ck.nets["actor"], ck.nets["critic"], ck.nets["target_actor"], ck.nets["target_critic"],
        ck.meta.get("tau", 0.005), ck.meta.get("gamma", 0.99),
    )
    return nets, ck.meta
