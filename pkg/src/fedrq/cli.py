"""Command-line entry point: ``fedrq run`` and ``fedrq compare``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, COMPARE_HEADER, ConfigError,
                         InfeasibleCovering, compare_algorithms, read_config, resolve_config,
                         run_experiment)
from .metrics import rows_to_csv

log = logging.getLogger("fedrq")


def _omega(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors; argparse's default 2 means infeasible here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedrq", description="Federated robust Q-learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run one experiment and write its artifacts"),
                            ("compare", "compare FedRQ with QAvg over the config's seeds")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="YAML config or a run manifest.json")
        p.add_argument("--seed", type=int, help="override the family and training seed")
        p.add_argument("--algo", choices=("fedrq", "qavg"))
        p.add_argument("--mode", choices=("expected", "sampled"))
        p.add_argument("--omega", type=_omega, help="'auto' or a number in [0, 1)")
        p.add_argument("--out", type=Path, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        raw = read_config(args.config)
        out = args.out or Path(raw.get("output", "runs/default"))
        cfg = resolve_config(raw, {"seed": args.seed, "algorithm": args.algo, "mode": args.mode,
                                   "omega": args.omega})
        if args.command == "run":
            code = run_experiment(cfg, out)
            if code == EXIT_OK:
                log.info("artifacts written to %s", out)
            return code
        rows = compare_algorithms(cfg, out)
        sys.stdout.write(rows_to_csv(COMPARE_HEADER, rows))
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except InfeasibleCovering as exc:
        log.error("infeasible covering: %s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
