"""Command line entry point: ``rwre-lab <experiment> --config FILE [--seed N] [--out DIR] [--threads K]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, ExperimentConfig
from .parallel import using_threads

log = logging.getLogger("rwre_lab")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rwre-lab", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", type=Path, default=Path("results"))
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: RWRE_LAB_THREADS or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.experiment)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    from .experiments import run

    with using_threads(args.threads):
        result = run(cfg)
    out = args.out / cfg.experiment
    for path in result.write(out):
        log.info("wrote %s", path)
    failed = [k for k, ok in result.checks.items() if not ok]
    for k in sorted(result.checks):
        print(f"{'PASS' if result.checks[k] else 'FAIL'} {cfg.experiment}:{k}")
    return EXIT_CHECK if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
