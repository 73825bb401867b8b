"""Command-line entry point: ``onestep <experiment> --config run.ini``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric
failure. The output directory is taken from ``--out``, else
``$OST_OUTPUT_DIR``, else the config file.
"""

import argparse
import logging
import os
import sys

from . import experiments
from .config import load_config
from .errors import ConfigError, NumericError, OSTError

SUBCOMMANDS = {
    "pipeline": "pipeline",
    "triptych": "triptych",
    "proxy-transfer": "proxy_transfer",
    "checkpoint-ablation": "checkpoint_ablation",
    "noise-rejection": "noise_rejection",
}
OUTPUT_ENV = "OST_OUTPUT_DIR"


def build_parser():
    parser = argparse.ArgumentParser(prog="onestep", description="One-step-train data selection experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log phase timings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", help="output directory (overrides $%s and the config)" % OUTPUT_ENV)
        p.add_argument("--workers", type=int, default=1, help="worker threads (outputs do not depend on it)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
    return parser


def run(argv=None):
    """Run one experiment; returns the driver's result. Raises on failure."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    name = SUBCOMMANDS[args.command]
    overrides = {"experiment.name": name}
    if args.seed is not None:
        overrides["experiment.seed"] = args.seed
    cfg = load_config(args.config, overrides)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    out = args.out or os.environ.get(OUTPUT_ENV) or cfg.experiment.output_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return experiments.RUNNERS[name](cfg, out, workers=args.workers)


def main(argv=None):
    try:
        run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSTError as exc:
        # unusable inputs (missing flags, bad IDX files, oversize LOO) rank with config errors
        print(f"input error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
