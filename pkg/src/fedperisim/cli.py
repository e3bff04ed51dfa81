"""Command-line entry point.

    fedperisim generate|preprocess|train|evaluate|report
               [--config PATH] [--paradigm P] [--seed N] [--out DIR]

Exit codes: 0 ok, 2 config error, 3 stage-order/stale-cache error,
4 numeric divergence.  FEDPERISIM_THREADS caps client parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import experiment as ex
from . import federation as fed
from .errors import (ConfigError, DivergenceError, FedperisimError,
                     StageOrderError)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedperisim",
        description="Federated-learning simulation for multi-task "
                    "perioperative risk models on synthetic two-site data.")
    parser.add_argument("command",
                        choices=["generate", "preprocess", "train", "evaluate",
                                 "report", "run"],
                        help="pipeline stage to run ('run' executes all stages)")
    parser.add_argument("--config", default=None,
                        help="TOML or JSON experiment config (default: built-in)")
    parser.add_argument("--paradigm", default=None, choices=fed.PARADIGMS,
                        help="restrict train/evaluate to one paradigm")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help="override the config output directory")
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    if args.config is None:
        cfg = ex.default_config()
    else:
        cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=args.seed,
            sites=[dataclasses.replace(s, seed=args.seed) for s in cfg.sites])
    if args.out is not None:
        cfg = dataclasses.replace(cfg, outdir=args.out)
    return cfg


def _paradigms(cfg, args):
    if args.paradigm is not None:
        if args.paradigm not in cfg.paradigms:
            raise ConfigError(
                f"paradigm {args.paradigm!r} is not in the configured set "
                f"{cfg.paradigms}")
        return [args.paradigm]
    return cfg.paradigms


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            print(ex.stage_generate(cfg))
        elif args.command == "preprocess":
            print(ex.stage_preprocess(cfg))
        elif args.command == "train":
            for paradigm in _paradigms(cfg, args):
                print(ex.stage_train(cfg, paradigm))
        elif args.command == "evaluate":
            for paradigm in _paradigms(cfg, args):
                print(ex.stage_evaluate(cfg, paradigm))
        elif args.command == "report":
            print(ex.stage_report(cfg))
        elif args.command == "run":
            print(ex.run_all(cfg))
    except DivergenceError as exc:
        print(f"fedperisim: divergence: {exc}", file=sys.stderr)
        return 4
    except StageOrderError as exc:
        print(f"fedperisim: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"fedperisim: config error: {exc}", file=sys.stderr)
        return 2
    except FedperisimError as exc:
        print(f"fedperisim: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
