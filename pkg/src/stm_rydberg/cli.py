"""Command-line entry point: one verb per experiment.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 file I/O error, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import sweep
from .config import load_config
from .errors import StmError

EXIT_IO = 4

VERBS = {
    "pulse-response": sweep.run_pulse_response,
    "snr-sweep": sweep.run_snr_sweep,
    "ber-map": sweep.run_ber_map,
    "spectrum": sweep.run_spectrum,
}


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stm-rydberg", description="Spatiotemporal-multiplexed Rydberg receiver model")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="TOML config file (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides [output].directory)")
        p.add_argument("--seed", type=_u64, help="root seed (overrides [numerics].seed)")
        p.add_argument("--threads", type=_positive_int, help="worker threads")
        p.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if args.quiet else logging.INFO)
    logging.captureWarnings(True)
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, threads=args.threads, directory=args.out)
        VERBS[args.verb](cfg)
    except StmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
