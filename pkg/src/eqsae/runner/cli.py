"""Command line entry point: ``eqsae <stage> [--config PATH] [--scale desk|paper] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .stages import STAGES, Pipeline, StageError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqsae", description="Equivariant SAE experiment pipeline")
    parser.add_argument("command", choices=[*STAGES, "all"], help="stage to run, or 'all' for the full pipeline")
    parser.add_argument("--config", default=None, help="JSON config file (see docs/config_schema.json)")
    parser.add_argument("--scale", choices=["desk", "paper"], default=None, help="preset grid (overrides the file)")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides the file)")
    parser.add_argument("--stage-parallelism", type=int, default=1,
                        help="worker processes for independent jobs within a stage")
    parser.add_argument("--output-dir", default=None, help="run directory (overrides the file)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, scale=args.scale, seed=args.seed)
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        if args.stage_parallelism < 1:
            raise ConfigError("--stage-parallelism must be >= 1")
        pipe = Pipeline(cfg, parallelism=args.stage_parallelism)
        records = pipe.run_all() if args.command == "all" else pipe.run_stage(args.command)
    except ConfigError as exc:
        print(f"eqsae: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"eqsae: {exc}", file=sys.stderr)
        return 1
    for rec in records:
        status = "cached" if rec.cache_hit else f"{rec.seconds:.1f}s"
        print(f"{rec.key}: {status}")
    print(f"run directory: {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
