"""Command-line entry point: ``umbpo {train,eval,error-analysis,plot}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..agent import evaluate
from ..envs import make_env
from ..policy import DeterministicPolicy
from .config import ConfigError, build_agent, load_config, write_frozen
from .error_analysis import error_analysis
from .metrics import MetricsWriter, write_timings
from .plot import PlotError, plot_metrics

OUT_ENV_VAR = "UMBPO_OUT_DIR"
logger = logging.getLogger("umbpo")


def _horizons(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"horizons must be comma-separated integers, got {text!r}")
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("horizons must be non-negative and non-empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umbpo", description="Uncertainty-aware model-based policy optimization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent and write metrics and checkpoints")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="override agent.seed")
    p.add_argument("--steps", type=int, default=None, help="override agent.total_steps")
    p.add_argument("--out", default=None,
                   help=f"output directory (default: ${OUT_ENV_VAR} or runs/), created if missing")

    p = sub.add_parser("eval", help="evaluate a saved policy on fresh episodes")
    p.add_argument("--policy", required=True, help="policy.params checkpoint")
    p.add_argument("--episodes", type=int, default=20, help="number of evaluation episodes")
    p.add_argument("--env", default="pendulum", help="environment name")
    p.add_argument("--seed", type=int, default=0, help="seed for episode start states")

    p = sub.add_parser("error-analysis", help="value-estimate error of learned models versus horizon")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--horizons", type=_horizons, default=None,
                   help="comma-separated rollout horizons (default: error_analysis.horizons)")
    p.add_argument("--out", default=None, help="CSV output path (default: error_curve.csv in the output dir)")

    p = sub.add_parser("plot", help="SVG learning curve (mean and one std band across runs)")
    p.add_argument("--metrics", required=True, nargs="+", help="one metrics.csv per run")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--column", default="eval_return", help="metric column to plot")
    return parser


def _out_dir(arg: Optional[str], default_name: str) -> Path:
    base = Path(arg) if arg else Path(os.environ.get(OUT_ENV_VAR, "runs")) / default_name
    base.mkdir(parents=True, exist_ok=True)
    return base


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["agent"]["seed"] = args.seed
    if args.steps is not None:
        cfg["agent"]["total_steps"] = args.steps
    out = _out_dir(args.out, f"{Path(args.config).stem}-seed{cfg['agent']['seed']}")
    write_frozen(cfg, out)
    agent = build_agent(cfg)
    agent.initialize()
    with MetricsWriter(out / "metrics.csv", cfg["dynamics"]["n_members"]) as writer:
        agent.fit(callback=lambda row: writer.write(row.as_dict()))
    write_timings(out / "timings.csv", agent.record_.step_ms)
    agent.save(out)
    final = agent.record_.eval_returns[-1] if agent.record_.eval_returns else float("nan")
    print(f"trained {agent.t_} steps; final eval return {final:.2f}; output in {out}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return 1
    policy = DeterministicPolicy.load(args.policy)
    env = make_env(args.env)
    if policy.state_dim_ != env.spec.state_dim:
        print(f"error: policy expects state dim {policy.state_dim_}, env {args.env} has "
              f"{env.spec.state_dim}", file=sys.stderr)
        return 1
    mean, returns = evaluate(policy, env, args.episodes, np.random.default_rng(args.seed))
    print(f"mean return {mean:.2f} ± {returns.std():.2f} over {args.episodes} episodes")
    return 0


def cmd_error_analysis(args) -> int:
    cfg = load_config(args.config)
    curve = error_analysis(cfg, args.horizons)
    path = Path(args.out) if args.out else _out_dir(None, f"{Path(args.config).stem}-error") / "error_curve.csv"
    curve.write_csv(path)
    print("H,one_step_mse,value_mse_mean,value_mse_std")
    for row in curve.rows():
        print(f"{row['H']},{row['one_step_mse']:.6g},{row['value_mse_mean']:.6g},{row['value_mse_std']:.6g}")
    print(f"spearman rho {curve.spearman:.3f}; written to {path}")
    return 0


def cmd_plot(args) -> int:
    path = plot_metrics(args.metrics, args.out, args.column)
    print(f"wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "error-analysis": cmd_error_analysis, "plot": cmd_plot}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PlotError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
