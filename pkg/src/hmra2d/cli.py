"""
Command line interface.

    hmra2d pipeline --config smoke.json --out run1
    hmra2d simulate --config cfg.json --out run1
    hmra2d solve --config cfg.json --out run1 --fix-pi

Each subcommand runs one stage (``pipeline`` runs the stages listed in the
config) against the files in the output directory.  The log level comes from
the HMRA2D_LOG environment variable.  Exit codes: 0 success, 1 config error,
2 data or format error, 3 solver non-convergence (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .pipeline import (
    STAGES,
    ConfigError,
    NonConvergence,
    _merge,
    load_config,
    run_stages,
    validate_config,
)
from .stackfile import StackFileError

logger = logging.getLogger("hmra2d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


def resolve_config(name):
    """A config path, or the name of a bundled config such as ``smoke.json``."""
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("hmra2d") / "configs" / path.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config file not found: {name}")


def build_parser():
    parser = argparse.ArgumentParser(prog="hmra2d", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all configured stages")
        p.add_argument("--config", required=True, help="JSON config file or bundled config name")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--threads", type=int, help="worker threads for solver restarts")
        p.add_argument("--fix-pi", action="store_true", help="hold the mixing weights at the configured pi")
    return parser


def _configure_logging():
    level = os.environ.get("HMRA2D_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _overrides(args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over.setdefault("solver", {})["workers"] = args.threads
    if args.fix_pi:
        over.setdefault("solver", {})["fix_pi"] = True
    if args.out is not None:
        over["out"] = args.out
    return over


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(resolve_config(args.config))
        cfg = validate_config(_merge(cfg, _overrides(args)))
        stages = cfg["stages"] if args.command == "pipeline" else [args.command]
        results = run_stages(cfg, stages, cfg["out"], command=" ".join(["hmra2d"] + list(argv or sys.argv[1:])))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (StackFileError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NonConvergence as err:
        print(f"solver did not converge: {err}", file=sys.stderr)
        return EXIT_SOLVER
    # every printed number is also in manifest.json / report.json
    print(json.dumps(results, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
