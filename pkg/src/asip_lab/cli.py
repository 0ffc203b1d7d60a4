"""Command line: ``asip-lab <experiment> --config FILE [--threads N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from .harness.config import EXPERIMENTS, load_config
from .harness.experiments import ExperimentFailure, run_experiment
from .harness.reports import emit_report

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="asip-lab", description="Run a simulation experiment.")
    p.add_argument("experiment", help="experiment name, or 'list'")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--threads", type=int, default=1, help="worker threads for replicas")
    p.add_argument("--out", default=None, help="output directory (default: config or '.')")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.experiment == "list":
        for name in EXPERIMENTS:
            print(name)
        return EXIT_OK
    if args.experiment not in EXPERIMENTS:
        print(f"unknown experiment {args.experiment!r}; valid names: {', '.join(EXPERIMENTS)}",
              file=sys.stderr)
        return EXIT_INVALID
    if not args.config:
        print("--config is required", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config, args.experiment)
    except ValidationError as exc:
        print(f"invalid config for {args.experiment}:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"cannot read config {args.config!r}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        report = run_experiment(cfg, threads=args.threads)
    except ExperimentFailure as exc:
        print(f"{args.experiment}: {exc}", file=sys.stderr)
        return exc.code
    out = args.out or cfg.output.dir or "."
    try:
        paths = emit_report(report, out, cfg.output.format)
    except OSError as exc:
        print(f"{args.experiment}: emit_report(out={out!r}) failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in paths:
        print(p)
    if report.failures:
        print(f"{args.experiment}: {len(report.failures)} failed checks: "
              f"{json.dumps(report.failures[:5])}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
