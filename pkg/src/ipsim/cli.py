"""Command line entry point: ``sim run|lln|clt|validate --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigErrors, validate_config
from .errors import SimError
from .runner import EXIT_ERROR, SUBCOMMANDS, run_experiment

log = logging.getLogger("ipsim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="Interacting particle system experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment JSON file")
        s.add_argument("--seed", type=int, help="override run.seed")
        s.add_argument("--replicas", type=int, help="override run.replicas")
        s.add_argument("--out", help="override output.dir")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = validate_config(args.config)
    except ConfigErrors as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_ERROR
    try:
        man, code = run_experiment(cfg, args.command, args.out, args.seed, args.replicas)
    except (SimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # a failed worker fails the run
        log.exception("execution failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{args.command}: {man.verdict} ({len(man.outputs)} files)")
    return code


if __name__ == "__main__":
    sys.exit(main())
