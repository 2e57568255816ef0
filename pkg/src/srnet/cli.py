"""``srnet <command> --config <path> [--seed N] [--out DIR]``."""

import argparse
import json
import logging
import sys

from .errors import ConfigError, DataError, NumericalFailure, PreconditionError
from .experiments import commands
from .experiments.config import load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DATA = 4

log = logging.getLogger("srnet")


def build_parser():
    parser = argparse.ArgumentParser(prog="srnet", description="Stable-rank constrained random network experiments.")
    parser.add_argument("command", choices=sorted(commands.COMMANDS))
    parser.add_argument("--config", required=True, help="JSON file with a single top-level 'experiment' object")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory (default: config output_dir or srnet-out/<command>)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.seed, args.out)
        out_dir, summary = commands.run(cfg)
    except (ConfigError, PreconditionError) as exc:
        print(f"srnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"srnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"srnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"command": args.command, "output_dir": out_dir, "summary": summary},
                     indent=1, sort_keys=True, default=commands._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
