"""Command-line interface: generate-data, run, report, selftest."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import DEFAULTS_HELP, ConfigError, parse_config
from .runner import prepare_dataset, report, run_experiment
from .selftest import run_selftest

OUTPUT_ENV = "PROTOFED_OUTPUT"


def _resolve_output(cli_value: str | None, manifest_dir: str) -> str:
    if cli_value:
        return cli_value
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return env
    return manifest_dir


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Deterministic federated-learning simulator with "
        "prototype-margin attentive aggregation.",
        epilog=DEFAULTS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate-data", help="build (and cache) the manifest's dataset")
    p_gen.add_argument("--config", required=True, help="experiment config file")
    p_gen.add_argument("--output", help=f"output directory (or ${OUTPUT_ENV})")

    p_run = sub.add_parser("run", help="run every (strategy, delta, seed) cell of a manifest")
    p_run.add_argument("--config", required=True, help="experiment config file")
    p_run.add_argument("--output", help=f"output directory (or ${OUTPUT_ENV})")
    p_run.add_argument("--cells", help="only run cells whose name contains this substring")
    p_run.add_argument("--threads", type=int, default=1, help="parallel cell workers")
    p_run.add_argument("--seed-override", type=int, help="replace the manifest's seed list")

    p_rep = sub.add_parser("report", help="aggregate run summaries into tables")
    p_rep.add_argument("--output", help=f"run directory (or ${OUTPUT_ENV})")

    p_self = sub.add_parser("selftest", help="run the oracle/property suites (< 60 s)")
    p_self.add_argument("--quiet", action="store_true")

    args = parser.parse_args(argv)

    if args.command == "selftest":
        return run_selftest(verbose=not args.quiet)

    if args.command == "report":
        out = _resolve_output(args.output, "runs")
        sys.stdout.write(report(out))
        return 0

    try:
        manifest = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = _resolve_output(args.output, manifest.output_dir)
    if args.command == "generate-data":
        try:
            dataset = prepare_dataset(manifest, Path(out) / "cache")
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(
            f"dataset ready: {dataset.num_clients} clients, "
            f"{dataset.total_samples} samples, {dataset.num_classes} classes, "
            f"input dim {dataset.input_dim}"
        )
        return 0

    return run_experiment(
        manifest,
        threads=args.threads,
        cells_filter=args.cells,
        seed_override=args.seed_override,
        output_dir=out,
    )


if __name__ == "__main__":
    raise SystemExit(main())
