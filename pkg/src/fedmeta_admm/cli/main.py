"""``fedmeta-admm`` command-line entry point."""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from ..admm import DivergenceError, DualIdentityError
from . import commands
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmeta-admm",
                                     description="ADMM-based federated meta-learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        return p

    p = add("train", "run federated meta-training; writes trace.csv and a checkpoint")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    p = add("evaluate", "fast-adaptation metrics on the target nodes")
    p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint.fmadmm")
    add("pretrain", "fit the prior-task model used by the forgetting protocol")
    add("forgetting", "split-task forgetting protocol over the lambda sweep")
    p = add("diagnose", "constants, penalty-condition verdicts and similarity estimates")
    p.add_argument("--checkpoint", help="probe around this model (default: the initial model)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"fedmeta-admm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            return commands.cmd_train(cfg, args.resume)
        if args.command == "evaluate":
            return commands.cmd_evaluate(cfg, args.checkpoint)
        if args.command == "pretrain":
            return commands.cmd_pretrain(cfg)
        if args.command == "forgetting":
            return commands.cmd_forgetting(cfg)
        return commands.cmd_diagnose(cfg, args.checkpoint)
    except (DivergenceError, DualIdentityError) as exc:
        print(f"fedmeta-admm: run aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, RuntimeError, TypeError, FloatingPointError) as exc:
        print(f"fedmeta-admm: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
