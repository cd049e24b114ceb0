"""Worst-case disturbance search over a Euclidean ambiguity ball.

The adversary keeps one constant disturbance vector per training phase. At
the end of each episode it differentiates the discounted loss through the
recorded rollout (dynamics and safety filter) and takes one projected
gradient ascent step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import envs
from .cbf import SafetyFilter
from .envs import EnvModel, Trajectory
from .errors import NumericError, ShapeError


@dataclass
class NoisePrior:
    """Nominal disturbance distribution: Gaussian (mean, std) or uniform box (low, high)."""

    kind: str
    dim: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self) -> None:
        def vec(v, fill):
            a = np.full(self.dim, fill, dtype=np.float64) if v is None else np.asarray(v, dtype=np.float64)
            return np.broadcast_to(a, (self.dim,)).copy()

        if self.kind == "gaussian":
            self.mean = vec(self.mean, 0.0)
            self.std = vec(self.std, 0.1)
            if np.any(self.std < 0):
                raise ValueError("noise std must be nonnegative")
        elif self.kind == "uniform":
            self.low = vec(self.low, -0.1)
            self.high = vec(self.high, 0.1)
            if np.any(self.low > self.high):
                raise ValueError("uniform noise needs low <= high")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @property
    def expectation(self) -> np.ndarray:
        return self.mean.copy() if self.kind == "gaussian" else 0.5 * (self.low + self.high)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        if self.kind == "gaussian":
            return self.mean + self.std * rng.standard_normal(shape)
        return rng.uniform(self.low, self.high, size=shape)


@dataclass
class AmbiguityBall:
    center: np.ndarray
    radius: float
    norm_order: int = 2

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).copy()
        if not self.radius > 0:
            raise ValueError(f"ambiguity radius must be positive, got {self.radius}")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("ambiguity center must be finite")
        if self.norm_order != 2:
            raise ValueError("only the Euclidean ball is supported")

    def contains(self, omega, tol: float = 1e-12) -> bool:
        return float(np.linalg.norm(np.asarray(omega) - self.center)) <= self.radius + tol


@dataclass
class AdversaryState:
    omega: np.ndarray
    step_size: float = 0.01
    iteration: int = 0
    decay: float = 1.0

    def __post_init__(self) -> None:
        self.omega = np.asarray(self.omega, dtype=np.float64).copy()
        if not self.step_size > 0:
            raise ValueError("adversary step size must be positive")


def project(omega_bar, ball: AmbiguityBall) -> np.ndarray:
    """Closest point of the ball: c + rho (w - c) / max(rho, ||w - c||)."""
    w = np.asarray(omega_bar, dtype=np.float64)
    if w.shape != ball.center.shape:
        raise ShapeError(f"omega has shape {w.shape}, ball center {ball.center.shape}")
    d = w - ball.center
    norm = float(np.linalg.norm(d))
    if norm <= ball.radius:
        return w.copy()
    return ball.center + ball.radius * d / norm


def discount_weights(T: int, gamma: float) -> np.ndarray:
    """gamma^k for k = 1..T."""
    return gamma ** np.arange(1, T + 1, dtype=np.float64)


def loss_from_trajectory(traj: Trajectory | np.ndarray, gamma: float) -> float:
    """L = -sum_k gamma^k r_k with k counted from 1."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    r = np.asarray(traj.rewards if isinstance(traj, Trajectory) else traj, dtype=np.float64)
    return float(-(discount_weights(len(r), gamma) @ r))


def grad_loss_wrt_omega(traj: Trajectory, model: EnvModel, gamma: float) -> np.ndarray:
    """dL/dw for a common shift of executed and assembly noise, by reverse sweep.

    Actions from the policy are held at their recorded values. The sweep
    includes how the filtered action reacts to the state, so the result is
    the exact derivative of the recorded open-loop rollout.
    """
    T = traj.length
    if len(traj.du_domega) < T or len(traj.du_dx) < T:
        raise ValueError("trajectory lacks per-step filter Jacobians; roll out with gradients enabled")
    w = discount_weights(T, gamma)
    grad = np.zeros(model.noise_dim)
    if T == 0:
        return grad
    a = -w[T - 1] * model.reward_grad_x(traj.states[T])
    for t in range(T - 1, -1, -1):
        x, u = traj.states[t], traj.actions_rect[t]
        Fx, Fu, Fw = envs.step_grads(model, x, u, traj.omega_exec[t])
        gu = Fu.T @ a
        grad += traj.du_domega[t].T @ gu + Fw.T @ a
        if t > 0:
            a = -w[t - 1] * model.reward_grad_x(x) + Fx.T @ a + traj.du_dx[t].T @ gu
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite adversary gradient")
    return grad


def pga_update(state: AdversaryState, grad, ball: AmbiguityBall) -> AdversaryState:
    """One ascent step, projection, then step-size decay."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to the adversary")
    omega = project(state.omega + state.step_size * grad, ball)
    return replace(state, omega=omega, step_size=state.step_size * state.decay, iteration=state.iteration + 1)


def estimate_radius(samples, wasserstein_rho: float) -> float:
    """rho + mean ||w0 - mean(w0)||: widen the ball by the sample spread."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 2:
        raise ValueError("estimate_radius needs at least two samples")
    return float(wasserstein_rho + np.mean(np.linalg.norm(s - s.mean(axis=0), axis=1)))


def resimulate(
    model: EnvModel,
    filt: SafetyFilter,
    x0,
    actions_rl,
    omega_exec,
    omega_asm,
    grads: bool = False,
) -> Trajectory:
    """Open-loop rollout with fixed raw actions.

    ``omega_exec`` and ``omega_asm`` are sequences of per-step disturbance
    vectors (or single vectors reused every step).
    """
    T = len(actions_rl)
    ex = _per_step(omega_exec, T, model.noise_dim)
    asm = _per_step(omega_asm, T, model.noise_dim)
    x = np.asarray(x0, dtype=np.float64).copy()
    traj = Trajectory(states=[x], h_values=[filt.h_value(x)])
    for t in range(T):
        res = filt.rectify(x, actions_rl[t], asm[t], grads=grads)
        x = envs.step(model, x, res.u, ex[t])
        traj.states.append(x)
        traj.actions_rl.append(np.asarray(actions_rl[t], dtype=np.float64))
        traj.actions_rect.append(res.u)
        traj.rewards.append(envs.reward(model, x, res.u))
        traj.omega_exec.append(ex[t])
        traj.omega_asm.append(asm[t])
        traj.h_values.append(filt.h_value(x))
        traj.fallbacks += int(res.fallback)
        if grads:
            traj.du_domega.append(res.du_domega)
            traj.du_dx.append(res.du_dx)
    return traj


def _per_step(omega, T: int, dim: int) -> list[np.ndarray]:
    arr = np.asarray(omega, dtype=np.float64)
    if arr.ndim == 1:
        return [arr.copy() for _ in range(T)]
    if arr.shape != (T, dim):
        raise ShapeError(f"per-step noise has shape {arr.shape}, expected {(T, dim)}")
    return [row.copy() for row in arr]


def ball_distance(omega, ball: AmbiguityBall) -> float:
    d = float(np.linalg.norm(np.asarray(omega) - ball.center))
    return d if math.isfinite(d) else math.inf
