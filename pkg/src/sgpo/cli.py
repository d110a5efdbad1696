"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 failed check, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from sgpo.group_opt import DivergenceError
from sgpo.harness import (
    LEMMAS,
    OUTPUT_ROOT_ENV,
    CheckFailure,
    ConfigError,
    OutputError,
    load_config,
    parse_config,
    run_all_seeds,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgpo",
        description="GRPO/SGPO dynamics, training and verification runs.",
        epilog=f"Without --out, runs go under ${OUTPUT_ROOT_ENV} (or the config's output_dir).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dynamics", help="closed-form population dynamics from p = q = 1/2")
    p.add_argument("--iters", type=int, default=200, metavar="K")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("train", help="sampled training from a config file")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, metavar="S", help="single seed (default: every seed in the config)")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("verify", help="numeric lemma certification")
    p.add_argument("--lemma", choices=sorted(LEMMAS), action="append", metavar="ID")
    p.add_argument("--resolution", type=int, metavar="R")
    p.add_argument("--iters", type=int, default=200, metavar="K", help="trace length for the dynamics lemma")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("estimator-check", help="Monte-Carlo gradient vs enumeration oracle")
    p.add_argument("--samples", type=int, required=True, metavar="M")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=3e-3)
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("sweep", help="cartesian sweep over trainer fields")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--out", metavar="DIR")
    return parser


def _inline_config(args) -> dict:
    if args.command == "dynamics":
        return {"kind": "dynamics", "K": args.iters, "eta": args.eta}
    if args.command == "verify":
        doc = {"kind": "verify", "lemmas": args.lemma or [], "K": args.iters}
        if args.resolution is not None:
            doc["resolution"] = args.resolution
        return doc
    return {
        "kind": "estimator-check",
        "samples": args.samples,
        "seeds": [args.seed],
        "point": [args.p, args.q],
        "tolerance": args.tol,
    }


def _run(args) -> None:
    if args.command in ("train", "sweep"):
        config = load_config(args.config)
        if config.kind != args.command:
            raise ConfigError(f"{args.config}: kind is {config.kind!r}, expected {args.command!r}")
        if getattr(args, "seed", None) is not None:
            manifests = [run_experiment(config, args.seed, args.out)]
        else:
            manifests = run_all_seeds(config, args.out)
    else:
        config = parse_config(_inline_config(args))
        manifests = [run_experiment(config, config.seeds[0], args.out)]
    for m in manifests:
        _report(m)


def _report(manifest) -> None:
    for line in manifest.checks:
        print(line)
    print(f"wrote {Path(manifest.output_dir) / 'manifest.json'}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as exc:
        if exc.manifest is not None:
            _report(exc.manifest)
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DivergenceError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OutputError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
