"""Command line: ``assocmem <command> ...``.

Exit codes: 0 success, 1 a verification property failed, 2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="assocmem", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for grid sweeps")
    common.add_argument("--out", default=None, help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "run GF/GD/SGD/SGF and record a trajectory"),
                        ("landscape", "loss / accuracy / sharpness over a gamma grid"),
                        ("phase", "steps to perfect accuracy over a parameter grid"),
                        ("closed-form", "binary closed-form margins against numerical flow")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("config", help="TOML config or JSON run manifest")
    p = sub.add_parser("reproduce", parents=[common], help="regenerate a scaled-down figure")
    p.add_argument("figure", help="fig1 ... fig6")
    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--strict", action="store_true", help="tighter numerical tolerances")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "verify":
        from .verify import format_report, verify

        results = verify(strict=args.strict)
        print(format_report(results))
        return EXIT_OK if all(r.ok for r in results) else EXIT_PROPERTY

    from . import experiments

    if args.command == "reproduce":
        if args.figure not in experiments.REGISTRY:
            print(f"error: unknown figure {args.figure!r}; choose from {', '.join(experiments.REGISTRY)}",
                  file=sys.stderr)
            return EXIT_CONFIG
        result = experiments.reproduce(args.figure, args.out, args.seed or 0, args.jobs)
    else:
        try:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            result = experiments.run_experiment(cfg, args.command, args.out, args.jobs)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    print(json.dumps(result.summary, indent=2, sort_keys=True, default=str))
    print(f"wrote {len(result.files)} files to {result.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
