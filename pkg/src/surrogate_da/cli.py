"""Command-line entry point: ``surrogate-da <command> --config PATH --run-dir PATH``.

Exit codes: 0 success, 1 usage or parameter error, 2 numerical divergence,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .config import load_config
from .errors import CapacityError, DivergenceError, SurrogateDAError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

COMMANDS = {
    "truth": experiment.cmd_truth,
    "observe": experiment.cmd_observe,
    "assimilate": experiment.cmd_assimilate,
    "forecast": experiment.cmd_forecast,
    "verify-theorem": experiment.cmd_verify_theorem,
    "metrics": experiment.cmd_metrics,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="surrogate-da", description="Surrogate-model 3DVar twin experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="experiment config (section.key = value lines)")
        p.add_argument("--run-dir", required=True, help="run directory to read from / write to")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args.run_dir)
    except DivergenceError as exc:
        print(f"surrogate-da: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SurrogateDAError, CapacityError) as exc:
        print(f"surrogate-da: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"surrogate-da: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
