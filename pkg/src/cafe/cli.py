"""Command-line entry point. Exit codes: 0 success, 2 config error, 3 stage failure."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .model import STRATEGIES
from .pipeline import AXES, STEPS, StageError, ablate, run_pipeline, run_step
from .trainer import TRANSFER_MODES

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--fusion", choices=STRATEGIES)
    p.add_argument("--transfer", choices=TRANSFER_MODES)
    p.add_argument("--out", metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafe", description="Curricular relation classification workbench.")
    sub = parser.add_subparsers(dest="command", required=True)
    for step in STEPS:
        p = sub.add_parser(step, help=f"run the {step} step")
        _common(p)
        if step == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate (default: the one under --out)")
    p = sub.add_parser("run", help="run every step from --from onward")
    _common(p)
    p.add_argument("--from", dest="start", choices=STEPS, default=STEPS[0])
    p = sub.add_parser("ablate", help="emit ablation tables")
    _common(p)
    p.add_argument("--axis", action="append", choices=AXES, help="repeatable; default is every axis")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports bad flags with code 2, which matches a config error
        return int(exc.code or 0)
    overrides = {k: getattr(args, k) for k in ("seed", "lam", "mu", "alpha", "fusion", "transfer", "out")}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            run_pipeline(cfg, args.start)
            print(json.dumps(json.loads((Path(cfg.out) / "provenance.json").read_text())["summary"], indent=2))
        elif args.command == "ablate":
            tables = ablate(cfg, tuple(args.axis or AXES))
            for axis, rows in tables.items():
                print(f"{axis}:")
                for row in rows:
                    print(f"  {row['setting']:<32} Mean {row['Mean']:.4f}  boundary mR@100 {row['boundary_mR@100']:.4f}")
        elif args.command == "eval":
            report = run_step("eval", cfg, checkpoint=args.checkpoint)
            print(json.dumps({"mean": report.mean, "recall": report.recall, "mean_recall": report.mean_recall}, indent=2))
        elif args.command == "report":
            print(json.dumps(run_step("report", cfg)["summary"], indent=2))
        else:
            run_step(args.command, cfg)
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
