"""Command line entry point: one subcommand per experiment kind."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import KINDS, ConfigError, load_config
from .runner import EXIT_SCHEMA, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffguard",
        description="Run a purification, attack, certification or bound experiment from a JSON config.",
    )
    sub = parser.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        p.add_argument("--threads", type=int, default=None, help="worker threads for per-example work")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    if cfg["kind"] != args.kind:
        print(f"config error: kind: config says {cfg['kind']!r} but subcommand is {args.kind!r}",
              file=sys.stderr)
        return EXIT_SCHEMA
    out = args.out
    if out is None:
        if "output_dir" not in cfg:
            print("config error: output_dir: give --out or set output_dir in the config", file=sys.stderr)
            return EXIT_SCHEMA
        # relative output directories are read relative to the config file, like checkpoints
        out = Path(cfg["_base_dir"]) / cfg["output_dir"]
    if args.threads is not None and args.threads < 1:
        print("config error: threads: must be >= 1", file=sys.stderr)
        return EXIT_SCHEMA
    return run(cfg, out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
