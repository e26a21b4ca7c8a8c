"""Command-line entry point: ``hardtsp generate|train|eval|hardness|plotdata``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from hardtsp import harness
from hardtsp.curriculum import TrainConfig, run_training
from hardtsp.errors import (
    CheckpointCompatibilityError,
    ConfigError,
    DegenerateInstanceError,
    FormatError,
    HardTspError,
    SizeLimitError,
)
from hardtsp.generators import (
    GmmConfig,
    HagConfig,
    SurrogateConfig,
    gen_gaussian_mixture,
    gen_hardness_adaptive,
    gen_uniform,
)
from hardtsp.io import atomic_write, read_dataset, write_dataset
from hardtsp.policy import PolicyModel

log = logging.getLogger("hardtsp")

USAGE_ERRORS = (ConfigError, FormatError, SizeLimitError, CheckpointCompatibilityError,
                FileNotFoundError)


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _positive_int(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def cmd_generate(args) -> int:
    if args.n < 3:
        raise UsageError("--n must be at least 3")
    header = {"generator": args.gen, "n": args.n, "count": args.count, "seed": args.seed}
    rng = np.random.default_rng(args.seed)
    if args.gen == "uniform":
        instances = gen_uniform(args.n, args.count, rng)
    elif args.gen == "gmm":
        cfg = GmmConfig(n=args.n, c_min=args.cmin, c_max=args.cmax, c_dist=args.cdist)
        header.update(c_min=cfg.c_min, c_max=cfg.c_max, c_dist=cfg.c_dist)
        instances = gen_gaussian_mixture(cfg, args.count, rng)
    else:
        if not args.model:
            raise UsageError("--gen hag requires --model <checkpoint>")
        model, _ = PolicyModel.load(args.model)
        cfg = HagConfig(n=args.n, eta=args.eta, steps=args.steps, rollouts=args.rollouts,
                        surrogate=SurrogateConfig(inner_steps=args.surrogate_steps,
                                                  inner_lr=args.surrogate_lr))
        header.update(eta=cfg.eta, steps=cfg.steps, rollouts=cfg.rollouts,
                      surrogate_steps=cfg.surrogate.inner_steps,
                      surrogate_lr=cfg.surrogate.inner_lr, model=Path(args.model).name)
        instances = gen_hardness_adaptive(model, cfg, args.count, rng)
    write_dataset(args.out, instances, header)
    print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def build_train_config(args) -> TrainConfig:
    config = harness.PROFILES[args.profile]()
    if args.config:
        config = harness.apply_overrides(config, harness.parse_config_text(
            Path(args.config).read_text(encoding="utf-8")))
    flags = {"seed": args.seed, "epochs": args.epochs, "n": args.n,
             "instances_per_epoch": args.instances_per_epoch, "batch_size": args.batch_size,
             "warmup_epochs": args.warmup_epochs, "lr": args.lr, "weight_decay": args.weight_decay,
             "hard_fraction": args.rho, "t_start": args.t_start, "t_end": args.t_end,
             "decay": args.decay, "transform": args.transform, "eval_count": args.eval_count,
             "eval_cdist": args.eval_cdist, "eval_gen": args.eval_gen, "hag.eta": args.eta,
             "hag.steps": args.steps}
    config = harness.apply_overrides(config, {k: v for k, v in flags.items() if v is not None})
    if args.curriculum is not None:
        config = replace(config, curriculum=args.curriculum)
    if args.hag is False:
        config = replace(config, hard_fraction=0.0)
    return config


def cmd_train(args) -> int:
    config = build_train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    init = PolicyModel.load(args.init, expect=config.policy)[0] if args.init else None
    finals = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        out = Path(args.out) if len(seeds) == 1 else Path(args.out) / f"seed-{seed}"
        result = run_training(cfg, init_model=init, out_dir=out, resume=args.resume)
        last = result.metrics[-1]
        finals.append(last.mean_gap)
        if last.mean_gap is not None:
            print(f"seed {seed}: final held-out gap {100 * last.mean_gap:.3f}% "
                  f"({last.oracle} oracle)")
    if len(seeds) > 1 and all(g is not None for g in finals):
        print(f"mean over {len(seeds)} seeds: {100 * np.mean(finals):.3f}% "
              f"+- {100 * np.std(finals):.3f}%")
    return 0


def cmd_eval(args) -> int:
    model, _ = PolicyModel.load(args.model)
    instances, _ = read_dataset(args.data)
    report = harness.evaluate(model, instances, args.oracle)
    if args.out:
        atomic_write(args.out, report.to_json())
    print(report.summary())
    return 0


def cmd_hardness(args) -> int:
    model, _ = PolicyModel.load(args.model)
    instances, _ = read_dataset(args.data)
    cfg = SurrogateConfig(inner_steps=args.surrogate_steps, inner_lr=args.surrogate_lr)
    rows = harness.hardness_rows(model, instances, cfg, args.rollouts, args.seed)
    atomic_write(args.out, harness.rows_to_csv(rows, harness.HARDNESS_COLUMNS))
    print(f"wrote {len(rows)} hardness rows to {args.out}")
    return 0


def cmd_plotdata(args) -> int:
    pairs = []
    for item in args.metrics:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or Path(item).stem, item
        pairs.append((label, path))
    atomic_write(args.out, harness.plot_table(pairs))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardtsp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a TSPH dataset")
    g.add_argument("--gen", choices=["uniform", "gmm", "hag"], required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--count", type=_positive_int, default=100)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--cdist", type=float, default=100.0)
    g.add_argument("--cmin", type=int, default=3)
    g.add_argument("--cmax", type=int, default=7)
    g.add_argument("--eta", type=float, default=5.0)
    g.add_argument("--steps", type=_positive_int, default=4)
    g.add_argument("--rollouts", type=_positive_int, default=8)
    g.add_argument("--surrogate-steps", type=int, default=1)
    g.add_argument("--surrogate-lr", type=float, default=1e-3)
    g.add_argument("--model")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the curriculum trainer")
    t.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk")
    t.add_argument("--config", help="flat 'key = value' file; flags override it")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seeds; each run goes to OUT/seed-K")
    t.add_argument("--curriculum", type=_on_off)
    t.add_argument("--hag", type=_on_off)
    t.add_argument("--epochs", type=int)
    t.add_argument("--n", type=int)
    t.add_argument("--instances-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--rho", type=float, help="fraction of hardness-adaptive instances")
    t.add_argument("--eta", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--t-start", type=float)
    t.add_argument("--t-end", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--transform", choices=["identity", "standardize"])
    t.add_argument("--eval-count", type=int)
    t.add_argument("--eval-cdist", type=float)
    t.add_argument("--eval-gen", choices=["gmm", "uniform"])
    t.add_argument("--init", help="warm-start checkpoint")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a dataset and report optimality gaps")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--oracle", choices=["exact", "twoopt"], default="exact")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("hardness", help="per-instance hardness report (CSV)")
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--surrogate-steps", type=int, default=1)
    h.add_argument("--surrogate-lr", type=float, default=1e-3)
    h.add_argument("--rollouts", type=_positive_int, default=8)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hardness)

    p = sub.add_parser("plotdata", help="align metrics files into one CSV")
    p.add_argument("metrics", nargs="+", help="metrics.jsonl paths, optionally LABEL=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        harness.configure_threads()
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"hardtsp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (HardTspError, OSError, DegenerateInstanceError) as exc:
        print(f"hardtsp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
