"""Command line: train, baseline, eval, compare.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import NoisePrior
from .cbf import SafetyFilter, make_barriers
from .config import RunConfig
from .ddpg import DDPGConfig, EpisodeContext, load_checkpoint, run_episode, train
from .envs import EnvModel, make_env
from .errors import ConfigError, NumericError

log = logging.getLogger("dsrl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUMMARY_FIELDS = ["seed", "return", "min_h", "reached_goal", "violations", "fallbacks", "steps"]


def build_model(cfg: RunConfig) -> EnvModel:
    e = cfg.env
    overrides = {k: v for k, v in vars(e).items() if k != "name" and v is not None}
    try:
        return make_env(e.name, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError("env", str(exc)) from exc


def build_context(cfg: RunConfig) -> EpisodeContext:
    model = build_model(cfg)
    b = cfg.barrier
    kw = dict(kappa1=b.kappa1, kappa2=b.kappa2)
    if model.name == "quad":
        kw["glide_slope_deg"] = b.glide_slope_deg
    else:
        kw.update(obstacle_center=b.obstacle_center, obstacle_radius=b.obstacle_radius)
    filt = SafetyFilter(model, make_barriers(model, **kw))
    nz = cfg.noise
    for name in ("mean", "std", "low", "high"):
        v = getattr(nz, name)
        if v is not None and len(v) != model.noise_dim:
            raise ConfigError(f"noise.{name}", f"needs {model.noise_dim} entries for {model.name}")
    prior = NoisePrior(nz.kind, model.noise_dim, nz.mean, nz.std, nz.low, nz.high)
    d = cfg.ddpg
    ddpg = DDPGConfig(
        tuple(d.hidden), d.gamma, d.tau, d.batch_size, d.buffer_size, d.actor_lr, d.critic_lr,
        d.ou_theta, d.ou_sigma, d.critic_action_source, d.reward_scale,
    )
    return EpisodeContext(model, filt, prior, nz.samples_per_step, ddpg)


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "checkpoint_every", None) is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    cfg.validate()
    return cfg


def _run_training(args, mode: str) -> int:
    cfg = _resolve(args)
    ctx = build_context(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.toml", {"version": __version__, "mode": mode})
    train(
        ctx,
        episodes=cfg.episodes,
        seed=cfg.seed,
        mode=mode,
        rho_d=cfg.ambiguity.rho_d,
        wasserstein_rho=cfg.ambiguity.wasserstein_rho,
        adversary_step=cfg.adversary.step,
        adversary_decay=cfg.adversary.decay,
        omega_init=cfg.adversary.init,
        out_dir=out,
        checkpoint_every=cfg.checkpoint_every,
        meta={"version": __version__, "seed": cfg.seed},
    )
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, "dsrl")


def cmd_baseline(args) -> int:
    return _run_training(args, "baseline_deterministic")


def _eval_one(job: dict) -> dict:
    cfg = RunConfig.from_dict(job["config"])
    ctx = build_context(cfg)
    nets, _ = load_checkpoint(job["checkpoint"])
    rng = np.random.default_rng(job["seed"])
    asm = np.asarray(job["omega_asm"])
    if job["noise"] == "sample":
        exec_ = ctx.prior.sample(rng)
    else:
        exec_ = np.asarray(job["omega_exec"])
    traj, _ = run_episode(nets, ctx, asm, rng, "eval", omega_exec=exec_)
    traj.write_csv(Path(job["out"]) / f"eval_seed{job['seed']}.csv", ctx.model)
    h = np.asarray(traj.h_values)
    return {
        "seed": job["seed"],
        "return": traj.episode_return(),
        "min_h": float(h.min()),
        "reached_goal": traj.reached_goal,
        "violations": int(np.sum(h < 0)),
        "fallbacks": traj.fallbacks,
        "steps": traj.length,
        "failed": traj.failed,
    }


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("DSRL_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError("DSRL_THREADS", f"not an integer: {cap!r}") from exc
    return max(1, min(limit, n_jobs))


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ctx = build_context(cfg)
    try:
        nets, meta = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError("--checkpoint", f"cannot load {args.checkpoint}: {exc}") from exc
    model = ctx.model
    if nets.actor.layer_sizes[0] != model.n or nets.actor.layer_sizes[-1] != model.m:
        raise ConfigError("--checkpoint", f"network sizes {nets.actor.layer_sizes} do not fit {model.name} (n={model.n}, m={model.m})")
    if meta.get("env") not in (None, model.name):
        raise ConfigError("--checkpoint", f"checkpoint is for {meta.get('env')}, config is for {model.name}")
    nominal = ctx.prior.expectation
    worst = np.asarray(meta.get("omega", nominal), dtype=np.float64)
    if args.omega_from:
        _, other = load_checkpoint(args.omega_from)
        worst = np.asarray(other["omega"], dtype=np.float64)
    if worst.shape != nominal.shape:
        raise ConfigError("--checkpoint", f"omega has {worst.shape[0]} entries, environment expects {nominal.shape[0]}")
    # the filter of a dsrl policy is assembled at its learned vector, a baseline's at the prior mean
    own = np.asarray(meta.get("omega", nominal), dtype=np.float64)
    asm = own if meta.get("mode", "dsrl") == "dsrl" else nominal
    exec_ = worst if args.noise == "worst" else nominal
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.toml", {"version": __version__, "checkpoint": str(args.checkpoint), "noise": args.noise})
    seeds = _parse_seeds(args.seeds)
    jobs = [
        {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint), "seed": s, "noise": args.noise,
         "omega_asm": asm.tolist(), "omega_exec": exec_.tolist(), "out": str(out)}
        for s in seeds
    ]
    workers = _workers(len(jobs))
    if workers == 1:
        rows = [_eval_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_eval_one, jobs))
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"{'seed':>6} {'return':>12} {'min_h':>10} {'goal':>5} {'viol':>5} {'fallback':>8}")
    for r in rows:
        print(f"{r['seed']:>6} {r['return']:>12.3f} {r['min_h']:>10.4f} {str(r['reached_goal']):>5} {r['violations']:>5} {r['fallbacks']:>8}")
    if any(r["failed"] for r in rows):
        raise NumericError("; ".join(f"seed {r['seed']}: {r['failed']}" for r in rows if r["failed"]))
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError("--seeds", f"expected comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds", "no seeds given")
    return seeds


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate_returns(runs: list[list[dict]]) -> list[dict]:
    """Per-episode mean, min, max and spread (max - min) of returns across runs."""
    n_ep = min((len(r) for r in runs), default=0)
    rows = []
    for ep in range(n_ep):
        vals = np.array([r[ep]["return"] for r in runs])
        rows.append({
            "episode": ep, "n": len(vals), "mean": float(vals.mean()),
            "min": float(vals.min()), "max": float(vals.max()), "spread": float(vals.max() - vals.min()),
        })
    return rows


def cmd_compare(args) -> int:
    runs, envs_seen, first = [], set(), None
    for d in args.runs:
        d = Path(d)
        try:
            cfg = RunConfig.load(d / "config.resolved.toml")
            runs.append(read_metrics(d / "metrics.jsonl"))
        except OSError as exc:
            raise ConfigError(str(d), f"not a run directory: {exc}") from exc
        envs_seen.add(cfg.env.name)
        first = first or cfg
    if len(envs_seen) > 1:
        raise ConfigError("runs", f"runs mix environments {sorted(envs_seen)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first.dump(out / "config.resolved.toml", {"version": __version__, "runs": [str(d) for d in args.runs]})
    rows = aggregate_returns(runs)
    with open(out / "returns.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "n", "mean", "min", "max", "spread"])
        w.writeheader()
        w.writerows(rows)
    with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        writer = None
        for d in args.runs:
            files = sorted(Path(d).glob("trajectory_*.csv"))
            if not files:
                continue
            with open(files[-1], newline="", encoding="utf-8") as src:
                reader = csv.reader(src)
                header = next(reader)
                if writer is None:
                    writer = csv.writer(fh)
                    writer.writerow(["run"] + header)
                for row in reader:
                    writer.writerow([str(d)] + row)
    print(f"aggregated {len(runs)} runs over {len(rows)} episodes into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsrl", description="Distributionally safe RL with a differentiable CBF filter.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("train", cmd_train, "train with the adversary"), ("baseline", cmd_baseline, "train at the nominal noise mean")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--checkpoint-every", type=int)
        sp.add_argument("--episodes", type=int)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("eval", help="deterministic rollouts of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--noise", choices=("nominal", "worst", "sample"), default="worst")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--omega-from", help="take the worst-case vector from another checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("compare", help="aggregate returns and trajectories of several runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
