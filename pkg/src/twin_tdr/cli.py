"""Command line entry point: ``twin-tdr {train,evaluate,sweep,bias-lab}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


from .actor import Actor
from .biaslab import run_bias_lab, write_theorem1_csv
from .config import ALGORITHMS, PRESETS, apply_overrides, from_dict, load_config, preset
from .critic import TwinCritic
from .distributional import DistTwinCritic, make_support
from .envs import make_env
from .errors import ConfigError, TrainingDiverged
from .nn import load_checkpoint
from .trainer import estimate_psi, evaluate, run_sweep, run_training

OUTPUT_ENV = "TWIN_TDR_OUTPUT_DIR"


def output_dir(arg):
    return Path(arg or os.environ.get(OUTPUT_ENV) or "runs")


def build_config(args):
    cfg = preset(args.preset, args.algorithm or "td3_tdr")
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.algorithm:
        cfg = from_dict({"algorithm": args.algorithm}, cfg)
    return apply_overrides(cfg, args.set or [])


def _add_config_args(p):
    p.add_argument("--config", help="JSON file with config fields")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")


def cmd_train(args):
    cfg = build_config(args)
    out = output_dir(args.out)
    try:
        result = run_training(cfg, out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 3
    last = result.rows[-1]
    print(f"step {last.step}: return {last.eval_return_mean:.3f} +/- {last.eval_return_std:.3f}, "
          f"psi {last.psi_estimate:.3f}")
    print(f"metrics: {result.metrics_path}\ncheckpoint: {result.checkpoint_path}")
    return 0


def restore(path):
    """Actor, critic and config from a final checkpoint."""
    nets, meta = load_checkpoint(path)
    cfg = from_dict(meta["config"])
    actor = Actor(nets["pi"], nets["pi_target"], cfg.rho if not cfg.baseline else 0.0, cfg.penalty_mode)
    if cfg.distributional:
        support = make_support(cfg.v_min, cfg.v_max, cfg.n_atoms)
        critic = DistTwinCritic(nets["z1"], nets["z2"], nets["z1_target"], nets["z2_target"], cfg.gamma, support)
    else:
        critic = TwinCritic(nets["q1"], nets["q2"], nets["q1_target"], nets["q2_target"], cfg.gamma)
    return actor, critic, cfg


def cmd_evaluate(args):
    actor, critic, cfg = restore(args.checkpoint)
    env = make_env(cfg.env_config())
    seed = cfg.eval_seed if args.seed is None else args.seed
    mean, std = evaluate(actor, env, args.episodes or cfg.eval_episodes, seed)
    psi = estimate_psi(actor, critic, env, cfg.psi_rollouts, cfg.gamma, seed, dump_dir=args.dump)
    print(json.dumps({"eval_return_mean": mean, "eval_return_std": std, "psi_estimate": psi}))
    return 0


def cmd_sweep(args):
    cfg = build_config(args)
    out = output_dir(args.out)
    agg, cells = run_sweep(cfg, args.rho, args.seeds, out, workers=args.workers)
    failed = [c for c in cells if c[2] is None]
    print(f"{len(cells) - len(failed)}/{len(cells)} runs completed; aggregate: {out / 'sweep.csv'}")
    for rho, seed, _, err in failed:
        print(f"  rho={rho} seed={seed}: {err}", file=sys.stderr)
    return 0 if not failed else 4


def cmd_bias_lab(args):
    text, rows, ok = run_bias_lab(seed=args.seed, n_samples=args.samples, noise_width=args.noise_width,
                                  n_trials=args.trials, rho=args.rho)
    out = output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bias_lab.txt").write_text(text)
    write_theorem1_csv(rows, out / "bias_lab.csv")
    print(text)
    return 0 if ok else 1


def make_parser():
    parser = argparse.ArgumentParser(prog="twin-tdr", description="Twin TD-regularized actor-critic experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump", help="directory for per-rollout trajectory CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="runs over a rho grid and several seeds")
    _add_config_args(p)
    p.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bias-lab", help="tabular and synthetic bias checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--noise-width", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")
    p.set_defaults(func=cmd_bias_lab)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
