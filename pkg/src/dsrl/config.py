"""Run configuration: TOML in, validated dataclasses, TOML out."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError

ENV_NAMES = ("dubins1", "dubins2", "quad")


@dataclass
class EnvSection:
    name: str = "dubins1"
    dt: float | None = None
    horizon: int | None = None
    x0: tuple[float, ...] | None = None
    xf: tuple[float, ...] | None = None
    u_low: tuple[float, ...] | None = None
    u_high: tuple[float, ...] | None = None
    goal_tol: float | None = None
    reward_d: float | None = None
    reward_s: float | None = None
    reward_b: float | None = None


@dataclass
class BarrierSection:
    obstacle_center: tuple[float, ...] | None = None
    obstacle_radius: float | None = None
    glide_slope_deg: float | None = None
    kappa1: float = 1.0
    kappa2: float = 1.0


@dataclass
class NoiseSection:
    kind: str = "gaussian"
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    low: tuple[float, ...] | None = None
    high: tuple[float, ...] | None = None
    samples_per_step: int = 8


@dataclass
class AmbiguitySection:
    rho_d: float = 0.3
    wasserstein_rho: float | None = None


@dataclass
class AdversarySection:
    step: float = 0.01
    decay: float = 0.999
    init: str = "random"


@dataclass
class DDPGSection:
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
class RunConfig:
    seed: int = 0
    episodes: int = 300
    checkpoint_every: int = 50
    out_dir: str = "runs"
    env: EnvSection = field(default_factory=EnvSection)
    barrier: BarrierSection = field(default_factory=BarrierSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    ambiguity: AmbiguitySection = field(default_factory=AmbiguitySection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    ddpg: DDPGSection = field(default_factory=DDPGSection)

    # ---------------------------------------------------------------- io
    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("<file>", f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def default(cls, env_name: str) -> RunConfig:
        if env_name not in ENV_NAMES:
            raise ConfigError("env.name", f"unknown environment {env_name!r}")
        text = resources.files("dsrl").joinpath("configs", f"{env_name}.toml").read_text(encoding="utf-8")
        return cls.from_dict(tomli.loads(text))

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dump(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d["meta"] = extra
        Path(path).write_text(tomli_w.dumps(d), encoding="utf-8")

    # -------------------------------------------------------- validation
    def validate(self) -> None:
        e, b, nz = self.env, self.barrier, self.noise
        if e.name not in ENV_NAMES:
            raise ConfigError("env.name", f"must be one of {ENV_NAMES}, got {e.name!r}")
        _require(self.episodes >= 0, "episodes", "must be >= 0")
        _require(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        if e.dt is not None:
            _require(e.dt > 0, "env.dt", "must be positive")
        if e.horizon is not None:
            _require(e.horizon >= 1, "env.horizon", "must be >= 1")
        if e.goal_tol is not None:
            _require(e.goal_tol > 0, "env.goal_tol", "must be positive")
        if e.u_low is not None and e.u_high is not None:
            _require(len(e.u_low) == len(e.u_high), "env.u_high", "length differs from env.u_low")
            _require(all(lo < hi for lo, hi in zip(e.u_low, e.u_high)), "env.u_high", "bounds must satisfy u_low < u_high")
        if e.name in ("dubins1", "dubins2"):
            _require(b.obstacle_center is not None, "barrier.obstacle_center", f"required for {e.name}")
            _require(len(b.obstacle_center) == 2, "barrier.obstacle_center", "must have two entries")
            _require(b.obstacle_radius is not None, "barrier.obstacle_radius", f"required for {e.name}")
            _require(b.obstacle_radius > 0, "barrier.obstacle_radius", "must be positive")
        else:
            _require(b.glide_slope_deg is not None, "barrier.glide_slope_deg", "required for quad")
            _require(0.0 < b.glide_slope_deg < 90.0, "barrier.glide_slope_deg", "must lie strictly between 0 and 90 degrees")
        _require(b.kappa1 > 0, "barrier.kappa1", "must be positive")
        _require(b.kappa2 > 0, "barrier.kappa2", "must be positive")
        _require(nz.kind in ("gaussian", "uniform"), "noise.kind", "must be 'gaussian' or 'uniform'")
        if nz.std is not None:
            _require(all(s >= 0 for s in nz.std), "noise.std", "must be nonnegative")
        if nz.low is not None and nz.high is not None:
            _require(all(lo <= hi for lo, hi in zip(nz.low, nz.high)), "noise.high", "must be >= noise.low")
        _require(nz.samples_per_step >= 1, "noise.samples_per_step", "must be >= 1")
        _require(self.ambiguity.rho_d > 0, "ambiguity.rho_d", "must be positive")
        if self.ambiguity.wasserstein_rho is not None:
            _require(self.ambiguity.wasserstein_rho >= 0, "ambiguity.wasserstein_rho", "must be >= 0")
        _require(self.adversary.step > 0, "adversary.step", "must be positive")
        _require(0 < self.adversary.decay <= 1, "adversary.decay", "must lie in (0, 1]")
        _require(self.adversary.init in ("random", "center"), "adversary.init", "must be 'random' or 'center'")
        d = self.ddpg
        _require(0 <= d.gamma <= 1, "ddpg.gamma", "must lie in [0, 1]")
        _require(0 < d.tau <= 1, "ddpg.tau", "must lie in (0, 1]")
        _require(d.batch_size >= 1, "ddpg.batch_size", "must be >= 1")
        _require(d.buffer_size >= 1, "ddpg.buffer_size", "must be >= 1")
        _require(d.actor_lr > 0, "ddpg.actor_lr", "must be positive")
        _require(d.critic_lr > 0, "ddpg.critic_lr", "must be positive")
        _require(d.ou_theta >= 0, "ddpg.ou_theta", "must be >= 0")
        _require(d.ou_sigma >= 0, "ddpg.ou_sigma", "must be >= 0")
        _require(len(d.hidden) >= 1 and all(h >= 1 for h in d.hidden), "ddpg.hidden", "needs positive layer widths")
        _require(d.critic_action_source in ("rectified", "raw"), "ddpg.critic_action_source", "must be 'rectified' or 'raw'")
        _require(d.reward_scale > 0, "ddpg.reward_scale", "must be positive")


def _require(ok: bool, field_name: str, message: str) -> None:
    if not ok:
        raise ConfigError(field_name, message)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = prefix + key
        if key == "meta" and not prefix:
            continue
        if key not in names:
            raise ConfigError(path, "unknown key")
        kwargs[key] = _coerce(hints[key], value, path)
    return cls(**kwargs)


def _coerce(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path + ".")
    args = typing.get_args(tp)
    if type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return _coerce(inner, value, path)
    if typing.get_origin(tp) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected an array")
        return tuple(_coerce(args[0], v, path) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")
