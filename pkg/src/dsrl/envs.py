"""Control-affine environments: first/second-order Dubins cars and a quadcopter.

All models integrate ``x' = f(x) + g(x) u + E w`` with explicit Euler, where
``E`` maps the disturbance into the state. The Dubins cars and the
quadcopter are disturbed on every state channel (E = I); the second-order
car is disturbed on its acceleration channels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError, SingularityError

GRAVITY = 9.81


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_u(theta: float, u: np.ndarray) -> np.ndarray:
    # d(R(theta) u)/dtheta
    c, s = math.cos(theta), math.sin(theta)
    return np.array([-s * u[0] - c * u[1], c * u[0] - s * u[1], 0.0])


@dataclass(frozen=True, eq=False)
class EnvModel:
    """Immutable description of one environment.

    Subclasses provide the dynamics terms; geometry and reward coefficients
    live in the fields so a config file can set them.
    """

    name: str = ""
    n: int = 0
    m: int = 0
    dt: float = 0.05
    horizon: int = 200
    u_low: np.ndarray = field(default=None)  # type: ignore[assignment]
    u_high: np.ndarray = field(default=None)  # type: ignore[assignment]
    x0: np.ndarray = field(default=None)  # type: ignore[assignment]
    xf: np.ndarray = field(default=None)  # type: ignore[assignment]
    goal_tol: float = 0.1
    reward_d: float = 1.0
    reward_s: float = 0.0
    reward_b: float = 0.0

    def __post_init__(self) -> None:
        for name in ("u_low", "u_high", "x0", "xf"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).copy())
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.u_low.shape != (self.m,) or self.u_high.shape != (self.m,):
            raise ShapeError("control bounds must have length m")
        if np.any(self.u_low >= self.u_high):
            raise ValueError("control bounds need lower < upper")
        if self.x0.shape != (self.n,) or self.xf.shape != (self.n,):
            raise ShapeError("x0/xf must have length n")

    # dynamics pieces -------------------------------------------------------
    @property
    def noise_dim(self) -> int:
        return self.noise_matrix.shape[1]

    @property
    def noise_matrix(self) -> np.ndarray:
        return np.eye(self.n)

    @property
    def position_index(self) -> list[int]:
        raise NotImplementedError

    def f(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def g(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def Df(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def Dgu(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Jacobian of ``g(x) u`` w.r.t. x for fixed u."""
        raise NotImplementedError

    # rewards ------------------------------------------------------------------
    def reward(self, x: np.ndarray, u: np.ndarray) -> float:
        raise NotImplementedError

    def reward_grad_x(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def goal_distance(self, x: np.ndarray) -> float:
        idx = self.position_index
        return float(np.linalg.norm(x[idx] - self.xf[idx]))


@dataclass(frozen=True, eq=False)
class Dubins1(EnvModel):
    """Kinematic car, state (x, y, theta), body-frame velocity inputs."""

    name: str = "dubins1"
    n: int = 3
    m: int = 3

    @property
    def position_index(self) -> list[int]:
        return [0, 1]

    def f(self, x):
        return np.zeros(3)

    def g(self, x):
        return _rot(x[2])

    def Df(self, x):
        return np.zeros((3, 3))

    def Dgu(self, x, u):
        J = np.zeros((3, 3))
        J[:, 2] = _drot_u(x[2], u)
        return J

    def reward(self, x, u):
        e = x[:2] - self.xf[:2]
        return -self.reward_d * float(e @ e) - self.reward_s

    def reward_grad_x(self, x):
        gr = np.zeros(3)
        gr[:2] = -2.0 * self.reward_d * (x[:2] - self.xf[:2])
        return gr


@dataclass(frozen=True, eq=False)
class Dubins2(EnvModel):
    """Second-order car, state (x, y, theta, vx, vy, omega), body-frame accelerations."""

    name: str = "dubins2"
    n: int = 6
    m: int = 3

    @property
    def position_index(self) -> list[int]:
        return [0, 1]

    @property
    def noise_matrix(self) -> np.ndarray:
        E = np.zeros((6, 3))
        E[3:, :] = np.eye(3)
        return E

    def f(self, x):
        return np.concatenate([x[3:6], np.zeros(3)])

    def g(self, x):
        G = np.zeros((6, 3))
        G[3:, :] = _rot(x[2])
        return G

    def Df(self, x):
        J = np.zeros((6, 6))
        J[:3, 3:] = np.eye(3)
        return J

    def Dgu(self, x, u):
        J = np.zeros((6, 6))
        J[3:, 2] = _drot_u(x[2], u)
        return J

    def reward(self, x, u):
        e = x[:2] - self.xf[:2]
        ev = x[3:5] - self.xf[3:5]
        return -self.reward_d * float(e @ e) - self.reward_b * float(ev @ ev) - self.reward_s

    def reward_grad_x(self, x):
        gr = np.zeros(6)
        gr[:2] = -2.0 * self.reward_d * (x[:2] - self.xf[:2])
        gr[3:5] = -2.0 * self.reward_b * (x[3:5] - self.xf[3:5])
        return gr


@dataclass(frozen=True, eq=False)
class Quad(EnvModel):
    """Heading-locked quadcopter driven through the virtual control
    v = (T sin(theta), T cos(theta) sin(phi), T cos(theta) cos(phi) - g)."""

    name: str = "quad"
    n: int = 3
    m: int = 3
    horizon: int = 300

    @property
    def position_index(self) -> list[int]:
        return [0, 1, 2]

    def f(self, x):
        return np.zeros(3)

    def g(self, x):
        return np.eye(3)

    def Df(self, x):
        return np.zeros((3, 3))

    def Dgu(self, x, u):
        return np.zeros((3, 3))

    def reward(self, x, u):
        e = x - self.xf
        return -float(e @ e)

    def reward_grad_x(self, x):
        return -2.0 * (x - self.xf)


ENVIRONMENTS = {"dubins1": Dubins1, "dubins2": Dubins2, "quad": Quad}

DEFAULTS = {
    "dubins1": dict(
        dt=0.05, horizon=200, u_low=[-1.0] * 3, u_high=[1.0] * 3,
        x0=[0.0, 0.0, 0.0], xf=[4.0, 4.0, 0.0], reward_d=0.1, reward_s=0.1,
    ),
    "dubins2": dict(
        dt=0.05, horizon=200, u_low=[-1.0] * 3, u_high=[1.0] * 3,
        x0=[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], xf=[4.0, 4.0, 0.0, 0.0, 0.0, 0.0],
        reward_d=0.1, reward_s=0.1, reward_b=0.1,
    ),
    "quad": dict(
        dt=0.05, horizon=300, u_low=[-1.0] * 3, u_high=[1.0] * 3,
        x0=[1.5, 1.0, 4.0], xf=[0.0, 0.0, 0.0],
    ),
}


def make_env(name: str, **overrides) -> EnvModel:
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    params = dict(DEFAULTS[name])
    params.update({k: v for k, v in overrides.items() if v is not None})
    return ENVIRONMENTS[name](**params)


# module-level operations --------------------------------------------------------


def step(model: EnvModel, x, u, omega) -> np.ndarray:
    """Explicit Euler: x + dt (f(x) + g(x) u + E w)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    xdot = model.f(x) + model.g(x) @ u + model.noise_matrix @ omega
    x_next = x + model.dt * xdot
    if not np.all(np.isfinite(x_next)):
        raise NumericError(f"non-finite state after step from {x}")
    return x_next


def step_grads(model: EnvModel, x, u, omega) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobians of :func:`step` w.r.t. (x, u, w)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dt = model.dt
    Fx = np.eye(model.n) + dt * (model.Df(x) + model.Dgu(x, u))
    return Fx, dt * model.g(x), dt * model.noise_matrix


def reward(model: EnvModel, x, u) -> float:
    return model.reward(np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64))


def reward_grads(model: EnvModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Rewards depend on the state only, so the control gradient is zero."""
    return model.reward_grad_x(np.asarray(x, dtype=np.float64)), np.zeros(model.m)


def recover_attitude(v, g_accel: float = GRAVITY) -> tuple[float, float, float]:
    """Invert the quadcopter virtual control to (thrust, pitch, roll)."""
    v = np.asarray(v, dtype=np.float64)
    up = v[2] + g_accel
    T = math.sqrt(v[0] ** 2 + v[1] ** 2 + up**2)
    if T <= 1e-9:
        raise SingularityError("zero thrust: virtual control cancels gravity (free fall)")
    return T, math.asin(max(-1.0, min(1.0, v[0] / T))), math.atan2(v[1], up)


def attitude_to_virtual(T: float, theta: float, phi: float, g_accel: float = GRAVITY) -> np.ndarray:
    return np.array(
        [T * math.sin(theta), T * math.cos(theta) * math.sin(phi), T * math.cos(theta) * math.cos(phi) - g_accel]
    )


@dataclass
class Trajectory:
    """One rollout. Index t runs over steps; ``states`` has one extra entry."""

    states: list[np.ndarray]
    actions_rl: list[np.ndarray] = field(default_factory=list)
    actions_rect: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    omega_exec: list[np.ndarray] = field(default_factory=list)
    omega_asm: list[np.ndarray] = field(default_factory=list)
    du_domega: list[np.ndarray] = field(default_factory=list)
    du_dx: list[np.ndarray] = field(default_factory=list)
    h_values: list[float] = field(default_factory=list)
    fallbacks: int = 0
    reached_goal: bool = False
    failed: str | None = None

    @property
    def length(self) -> int:
        return len(self.actions_rect)

    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    def min_h(self) -> float:
        return float(np.min(self.h_values)) if self.h_values else math.inf

    def write_csv(self, path, model: EnvModel) -> None:
        """One row per visited state; the last row carries no action or reward."""
        n, m, nw = model.n, model.m, model.noise_dim
        header = (
            ["t"]
            + [f"x{i}" for i in range(n)]
            + [f"u_rl{i}" for i in range(m)]
            + [f"u_r{i}" for i in range(m)]
            + [f"omega0_{i}" for i in range(nw)]
            + ["reward", "h"]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, x in enumerate(self.states):
                row: list = [t] + [_fmt(v) for v in x]
                if t < self.length:
                    row += [_fmt(v) for v in self.actions_rl[t]]
                    row += [_fmt(v) for v in self.actions_rect[t]]
                    row += [_fmt(v) for v in self.omega_exec[t]]
                    row += [_fmt(self.rewards[t])]
                else:
                    row += [""] * (2 * m + nw + 1)
                row.append(_fmt(self.h_values[t]) if t < len(self.h_values) else "")
                w.writerow(row)


def _fmt(v: float) -> str:
    return repr(float(v))


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Column name -> float array (blank cells become NaN)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) if r[i] != "" else math.nan for r in body]) for i, name in enumerate(header)}


def as_vector(x: Sequence[float] | np.ndarray, size: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise ShapeError(f"{name} must have length {size}, got {arr.shape[0]}")
    return arr
