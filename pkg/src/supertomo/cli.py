"""Command-line entry point: ``supertomo run | compare | phantom``.

Exit status is 0 on success, 2 when some repetitions failed and 1 on
configuration or input errors.  ``SUPERTOMO_OUTPUT_DIR`` overrides the
configured output directory of ``run``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__, io
from .campaign import compare, run_campaign, write_rows
from .config import ConfigError, parse_config
from .phantom import shepp_logan

OUTPUT_DIR_ENV = "SUPERTOMO_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    out = os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir
    result = run_campaign(cfg, out)
    n = len(result.outcomes)
    print(f"{n - result.failures}/{n} repetitions succeeded; artifacts in {result.output_dir}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _cmd_compare(args) -> int:
    header, rows = compare(args.run_dirs)
    if args.out is None:
        import csv
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([["" if v is None else v for v in row] for row in rows])
    else:
        write_rows(args.out, header, rows)
    return EXIT_OK


def _cmd_phantom(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    img = shepp_logan(args.n, args.scale)
    if Path(args.out).suffix == ".bin":
        io.write_binary(args.out, img)
    else:
        io.write_csv(args.out, img)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supertomo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a reconstruction campaign")
    r.add_argument("config", help="key = value configuration file")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="merge the curves of several campaigns")
    c.add_argument("run_dirs", nargs="+", help="campaign output directories")
    c.add_argument("--out", help="output CSV (default: stdout)")
    c.set_defaults(func=_cmd_compare)

    ph = sub.add_parser("phantom", help="write the Shepp-Logan phantom")
    ph.add_argument("--n", type=int, default=128, help="pixels per side")
    ph.add_argument("--scale", type=float, default=1.0, help="intensity multiplier")
    ph.add_argument("--out", required=True, help="output file; .bin for binary, else CSV")
    ph.set_defaults(func=_cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"supertomo: error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
