"""Command-line surface: homolab <experiment-kind> --config <path>."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigParseError, InvalidParameterError
from .runner import KINDS, NUMERICAL_ERRORS, parse_config, run, validate


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homolab",
        description="corrector calculus, effective coefficients, and two-scale expansion checks",
    )
    parser.add_argument("kind", choices=KINDS, help="experiment kind")
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers over environments")
    parser.add_argument("--seed-offset", type=int, default=0, help="added to every environment seed")
    parser.add_argument("--validate-only", action="store_true", help="report problems and exit")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text, kind=args.kind)
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if cfg.kind and cfg.kind != args.kind:
        print(f"error: config kind {cfg.kind!r} does not match command {args.kind!r}", file=sys.stderr)
        return 2
    cfg.kind = args.kind

    problems = validate(cfg)
    if args.validate_only:
        for p in problems:
            print(p)
        return 2 if problems else 0
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return 2
    try:
        manifest = run(cfg, out_dir=args.out, workers=args.workers, seed_offset=args.seed_offset)
    except InvalidParameterError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(f"ok: {manifest['kind']} -> {cfg.out_dir} ({manifest['wall_seconds']:.1f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
