"""Command line entry point.

    aoii-lab run CONFIG.json [--out DIR] [--workers K] [--trace]

Exit status: 0 on success, 2 for an invalid config, 3 when at least one
sweep cell failed to calibrate (the remaining results are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ConfigError, load_config, run_sweep, run_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoii-lab", description="Pull-based remote estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a policy sweep described by a JSON config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output_dir in the config)")
    run.add_argument("--workers", type=int, help="parallel simulation workers")
    run.add_argument("--trace", action="store_true", help="also write a single-run belief trace")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output_dir
    outcome = run_sweep(cfg, out, args.workers)
    if args.trace:
        run_trace(cfg, out)
    print(f"wrote {len(outcome.rows)} rows to {out}/results.csv")
    if outcome.failures:
        print(f"{outcome.failures} cell(s) failed to calibrate", file=sys.stderr)
        return EXIT_CALIBRATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
