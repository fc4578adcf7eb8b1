"""Command-line entry points.

    unlearn-bench run --config exp.cfg [--seed-offset K] [--jobs J]
    unlearn-bench isolation --parts 4,16,256 --n-max 4000 --step 10 --out curves.csv
    unlearn-bench sweep --config exp.cfg --vary test.n=100,200,400 [--jobs J]

`run` executes one experiment config over its seeds and writes
report.json / table.csv / table.txt / timings.csv.  `sweep` re-runs the
config once per value of a single key and adds a merged comparison CSV.
Configs are validated before anything is written; a bad config exits
nonzero with no partial outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import (
    ConfigurationError,
    EvaluationError,
    IdxFormatError,
    NumericalStabilityError,
    TestSpecError,
    TrainingError,
)
from .harness import (
    aggregate,
    experiment_config_from_items,
    export,
    load_experiment_config,
    parse_config_text,
    render_table_text,
    run_many,
)
from .isolation import emit_curves

_FAILURES = (
    ConfigurationError,
    TestSpecError,
    TrainingError,
    EvaluationError,
    IdxFormatError,
    NumericalStabilityError,
    OSError,
    ValueError,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="unlearn-bench",
        description="Deletion-test benchmark for inexact machine unlearning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed-offset", type=int, default=0)
    run_p.add_argument("--jobs", type=int, default=1)

    iso_p = sub.add_parser("isolation", help="emit isolation scaling curves")
    iso_p.add_argument("--parts", required=True,
                       help="comma-separated part counts, e.g. 4,16,256")
    iso_p.add_argument("--n-max", type=int, required=True)
    iso_p.add_argument("--step", type=int, default=1)
    iso_p.add_argument("--out", required=True)

    sweep_p = sub.add_parser("sweep", help="re-run a config across one varied key")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--vary", required=True,
                         help="key=v1,v2,... (a known config key)")
    sweep_p.add_argument("--jobs", type=int, default=1)
    return parser


def _cmd_run(args):
    config = load_experiment_config(args.config)
    seeds = [s + args.seed_offset for s in config.seeds]
    records = run_many(config, seeds, jobs=args.jobs)
    table = aggregate(records)
    export(
        table,
        records,
        config.output_dir,
        clamp_comi=config.clamp_comi,
        config_items=config.raw_items,
    )
    sys.stdout.write(render_table_text(table, config.clamp_comi))
    sys.stdout.write(f"report written to {config.output_dir}\n")
    return 0


def _cmd_isolation(args):
    try:
        parts = [int(p) for p in args.parts.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"--parts must be integers: {args.parts!r}") from exc
    emit_curves(parts, args.n_max, args.step, path=args.out)
    sys.stdout.write(f"curves written to {args.out}\n")
    return 0


def _cmd_sweep(args):
    key, _, values_text = args.vary.partition("=")
    key = key.strip()
    values = [v.strip() for v in values_text.split(",") if v.strip()]
    if not key or not values:
        raise ConfigurationError("--vary must look like key=v1,v2,...")
    with open(args.config, "r", encoding="utf-8") as fh:
        base_items = parse_config_text(fh.read())

    # Validate every variant before running anything.
    configs = []
    for value in values:
        items = dict(base_items)
        items[key] = value
        configs.append((value, experiment_config_from_items(items)))

    base_dir = configs[0][1].output_dir
    merged = []
    columns = None
    for value, config in configs:
        subdir = os.path.join(base_dir, f"{key}={value}".replace(os.sep, "_"))
        records = run_many(config, jobs=args.jobs)
        table = aggregate(records)
        export(table, records, subdir, clamp_comi=config.clamp_comi,
               config_items=config.raw_items)
        if columns is None:
            columns = table.columns
        elif columns != table.columns:
            raise ConfigurationError("sweep variants produced different columns")
        for i, method in enumerate(table.methods):
            cells = [value, method]
            for j in range(len(columns)):
                mean, std = table.means[i][j], table.stds[i][j]
                cells.append("" if mean is None else repr(mean))
                cells.append("" if std is None else repr(std))
            merged.append(cells)
        sys.stdout.write(f"{key}={value}: report written to {subdir}\n")

    header = [key, "method"] + [
        part
        for metric, target in columns
        for part in (f"{metric}_{target}_mean", f"{metric}_{target}_std")
    ]
    lines = [",".join(header)] + [",".join(row) for row in merged]
    os.makedirs(base_dir, exist_ok=True)
    sweep_path = os.path.join(base_dir, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    sys.stdout.write(f"merged comparison written to {sweep_path}\n")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "isolation": _cmd_isolation, "sweep": _cmd_sweep}[
        args.command
    ]
    try:
        return handler(args)
    except _FAILURES as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
