"""Command line entry points: train, eval, baseline."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import load_config
from .core import SeededStream
from .evalharness import (
    CSV_COLUMNS,
    evaluate,
    greedy_baseline,
    parse_grid,
    random_baseline,
)
from .trainer import train


def _mask_arg(text: str):
    if text.lower() in ("none", ""):
        return None
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("mask k must be at least 1")
    return k


def _seeds_arg(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmtrack")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train shared Q-nets")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tasks", required=True,
                        help='comma list of NaMt labels, k = thousands')
    common.add_argument("--mask-k", type=_mask_arg, default=None)
    common.add_argument("--episodes", type=int, default=50)
    common.add_argument("--seeds", type=_seeds_arg, default=(0, 1, 2, 3, 4))
    common.add_argument("--out", required=True)
    common.add_argument("--config", default=None,
                        help="optional config for world overrides")
    common.add_argument("--alpha", type=float, default=0.05)
    common.add_argument("--policy", choices=("stochastic", "greedy"),
                        default="stochastic")

    e = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on a task grid")
    e.add_argument("--checkpoint", required=True)

    b = sub.add_parser("baseline", parents=[common],
                       help="run a reference baseline over a task grid")
    b.add_argument("--kind", choices=("greedy", "random"), required=True)
    b.add_argument("--checkpoint", default=None,
                   help="required for the greedy baseline")
    return p


def _world_overrides(config_path) -> dict:
    return load_config(config_path).world if config_path else {}


def _eval_command(args, kind=None) -> int:
    overrides = _world_overrides(args.config)
    tasks = parse_grid(args.tasks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for task in tasks:
            kw = dict(world_overrides=overrides, writer=writer,
                      alpha=args.alpha, policy=args.policy)
            if kind == "random":
                rep = random_baseline(task, args.episodes, args.seeds, **kw)
            elif kind == "greedy":
                if not args.checkpoint:
                    print("greedy baseline needs --checkpoint", file=sys.stderr)
                    return 2
                rep = greedy_baseline(task, args.episodes, args.seeds,
                                      args.checkpoint, **kw)
            else:
                task_k = task if args.mask_k is None else \
                    type(task)(task.n_agents, task.m_targets, args.mask_k)
                rep = evaluate(args.checkpoint, task_k, args.episodes,
                               args.seeds, **kw)
            print(f"{rep.task.label} mask_k={rep.task.mask_k}: "
                  f"mean return {rep.mean_return:.3f} "
                  f"(std {rep.std_across_seeds:.3f} over {len(rep.seeds)} seeds)")
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        cfg = load_config(args.config)
        result = train(cfg.train, SeededStream(args.seed), args.out,
                       world_overrides=cfg.world, net_cfg=cfg.net)
        print(f"trained {result.env_steps} env steps, "
              f"{len(result.rows)} episodes; curve at {result.curve_path}")
        for p in result.checkpoint_paths:
            print(f"checkpoint {p}")
        return 0
    if args.command == "eval":
        return _eval_command(args)
    if args.command == "baseline":
        return _eval_command(args, kind=args.kind)
    return 2


if __name__ == "__main__":
    sys.exit(main())
