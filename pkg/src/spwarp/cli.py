"""Command-line entry point with fit / predict / basis / transform-check.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 archive version mismatch.
"""

from __future__ import annotations

import argparse
import sys

from .dataio import (RunConfig, _config_from_dict, parse_config, run_basis,
                     run_fit, run_predict, run_transform_check)
from .errors import ArchiveVersionError, ConfigError, DataError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERSION = 5


def _add_common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="eigenvalue retention threshold (fraction of the largest)")
    p.add_argument("--tr-num", type=int, default=None, dest="tr_num",
                   help="number of SAL transformation layers")
    p.add_argument("--y-type", choices=("continuous", "count"), default=None,
                   dest="y_type", help="response type")
    p.add_argument("--y-nonneg", action="store_const", const="true", default=None,
                   dest="y_nonneg", help="restrict the response to non-negatives")
    p.add_argument("--input", default=None, help="input CSV path")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spwarp",
        description="Warped spatial regression with Moran eigenvector bases")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in (
            ("fit", "fit a model and write coefficient/prediction artifacts"),
            ("predict", "predict at new sites from a model archive"),
            ("basis", "export the Moran eigenvector basis"),
            ("transform-check", "gaussianization ladder for one column")):
        p = sub.add_parser(name, help=descr)
        _add_common(p)
        if name == "predict":
            p.add_argument("--model", default=None, help="model archive path")
            p.add_argument("--prediction-input", default=None,
                           dest="prediction_input", help="prediction CSV path")
        if name == "transform-check":
            p.add_argument("--column", default=None,
                           help="numeric column to gaussianize")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    for key in ("seed", "out", "threshold", "tr_num", "y_type", "y_nonneg",
                "input", "model", "prediction_input", "column"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val if isinstance(val, str) else str(val)
    if args.config:
        return parse_config(args.config, overrides=overrides)
    return _config_from_dict(overrides, source="<command line>")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "fit":
            result = run_fit(config)
            sys.stdout.write(result["report"])
        elif args.command == "predict":
            result = run_predict(config)
            print(f"wrote {result['rows']} prediction rows to {result['path']}")
        elif args.command == "basis":
            result = run_basis(config)
            basis = result["basis"]
            print(f"{basis.n_components}/{basis.n_sites} eigen-pairs are extracted")
        elif args.command == "transform-check":
            result = run_transform_check(config)
            print(result["table"].to_string(index=False))
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"error [data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArchiveVersionError as exc:
        print(f"error [archive-version]: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except NumericError as exc:
        print(f"error [numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
