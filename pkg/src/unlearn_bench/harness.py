"""End-to-end experiment orchestration.

One run: build the deletion plan, train the original model on the
manipulated data, derive the retain set, apply each unlearning method,
evaluate every configured metric on the deletion set (memorization) and
on unseen samples of the affected classes (property generalization),
plus utility, and record wall times.  Runs are deterministic functions
of (config, seed); timings are kept out of the deterministic report.

Config files are flat `key = value` text with strict key checking; see
KNOWN_KEYS.  Sub-seeds for model init, batch shuffling, plan sampling,
and the membership attack are derived from the run seed through separate
spawn slots, so changing the method list never perturbs the plan.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    TestSpec,
    dt_for,
    from_idx_files,
    make_deletion_plan,
    synth_gaussians,
)
from .engine import ArchSpec, TrainingConfig, init_model, train
from .errors import (
    AggregationError,
    ConfigurationError,
    EvaluationError,
    TestSpecError,
    TrainingError,
)
from .metrics import (
    MetricReport,
    MiaConfig,
    comi,
    confusion_matrix,
    err,
    fgt_confusion,
    fgt_removed_class,
    utility_err,
)
from .unlearn import parse_method, apply as apply_method

SCHEMA_VERSION = 1
METRIC_ORDER = ("err", "fgt", "comi", "utility")
OUTPUT_DIR_ENV = "UNLEARN_BENCH_OUT"


# --------------------------------------------------------------------
# configuration

_REQUIRED = object()

# key -> (type tag, default); _REQUIRED means the file must set it.
KNOWN_KEYS = {
    "data.kind": ("str", "synthetic"),
    "data.num_classes": ("int", _REQUIRED),
    "data.per_class": ("int", _REQUIRED),
    "data.dims": ("int", _REQUIRED),
    "data.center_spread": ("float", 1.0),
    "data.noise_sigma": ("float", 0.1),
    "data.seed": ("int", 0),
    "data.train_images": ("str", None),
    "data.train_labels": ("str", None),
    "data.test_images": ("str", None),
    "data.test_labels": ("str", None),
    "data.valid_fraction": ("float", 0.0),
    "arch": ("str", _REQUIRED),
    "train.epochs": ("int", _REQUIRED),
    "train.batch_size": ("int", 64),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 5e-5),
    "train.min_lr": ("float", 5e-3),
    "train.max_lr": ("float", 1e-2),
    "train.t0": ("int", 1),
    "train.t_mult": ("int", 2),
    "train.warm_restarts": ("bool", True),
    "test.kind": ("str", _REQUIRED),
    "test.n": ("int", _REQUIRED),
    "test.classes": ("str", None),
    "test.removed_class": ("int", 0),
    "methods": ("str", _REQUIRED),
    "unlearn.k": ("int", None),
    "unlearn.cf_epochs": ("int", None),
    "metrics": ("str", "err,fgt,comi,utility"),
    "seeds": ("str", _REQUIRED),
    "mia.shadow_fraction": ("float", 0.5),
    "mia.repetitions": ("int", 20),
    "probe.epochs": ("int", 5),
    "report.clamp_comi": ("bool", False),
    "output_dir": ("str", None),
}

# Required synthetic-data keys that IDX datasets do not need.
_SYNTH_ONLY = {"data.num_classes", "data.per_class", "data.dims"}
_IDX_KEYS = ("data.train_images", "data.train_labels", "data.test_images",
              "data.test_labels")


def parse_config_text(text):
    """Parse flat `key = value` lines (blank lines and full-line `#`
    comments allowed) into a raw string dict.  Unknown or repeated keys
    are errors."""
    items = {}
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KNOWN_KEYS:
            unknown.append(key)
            continue
        if key in items:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return items


def _convert(key, value):
    tag = KNOWN_KEYS[key][0]
    try:
        if tag == "int":
            return int(value)
        if tag == "float":
            return float(value)
        if tag == "bool":
            low = value.lower()
            if low not in ("true", "false"):
                raise ValueError(value)
            return low == "true"
        return value
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {tag}") from exc


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    num_classes: int = 0
    per_class: int = 0
    dims: int = 0
    center_spread: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0
    idx_paths: tuple = ()
    valid_fraction: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    arch_layers: str
    training: TrainingConfig
    test_kind: str
    test_n: int
    test_classes: tuple | None
    test_removed_class: int
    methods: tuple
    metrics: tuple
    seeds: tuple
    mia_shadow_fraction: float
    mia_repetitions: int
    probe_epochs: int
    clamp_comi: bool
    output_dir: str
    raw_items: tuple = field(default=(), repr=False)


def experiment_config_from_items(items):
    """Validate raw string items against KNOWN_KEYS and build the typed
    experiment config."""
    unknown = sorted(set(items) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    missing = []
    for key, (_, default) in KNOWN_KEYS.items():
        if key in items:
            resolved[key] = _convert(key, items[key])
        elif default is _REQUIRED:
            missing.append(key)
        else:
            resolved[key] = default

    data_kind = resolved["data.kind"]
    if data_kind not in ("synthetic", "idx"):
        raise ConfigurationError(f"data.kind must be synthetic or idx")
    if data_kind == "idx":
        missing = [k for k in missing if k not in _SYNTH_ONLY]
        absent = [k for k in _IDX_KEYS if not resolved.get(k)]
        if absent:
            raise ConfigurationError(f"idx dataset needs keys: {', '.join(absent)}")
    if missing:
        raise ConfigurationError(f"missing required config keys: {', '.join(missing)}")

    if data_kind == "synthetic":
        dataset = DatasetConfig(
            kind="synthetic",
            num_classes=resolved["data.num_classes"],
            per_class=resolved["data.per_class"],
            dims=resolved["data.dims"],
            center_spread=resolved["data.center_spread"],
            noise_sigma=resolved["data.noise_sigma"],
            seed=resolved["data.seed"],
        )
    else:
        dataset = DatasetConfig(
            kind="idx",
            seed=resolved["data.seed"],
            idx_paths=tuple(resolved[k] for k in _IDX_KEYS),
            valid_fraction=resolved["data.valid_fraction"],
        )

    training = TrainingConfig(
        epochs=resolved["train.epochs"],
        batch_size=resolved["train.batch_size"],
        momentum=resolved["train.momentum"],
        weight_decay=resolved["train.weight_decay"],
        min_lr=resolved["train.min_lr"],
        max_lr=resolved["train.max_lr"],
        t0=resolved["train.t0"],
        t_mult=resolved["train.t_mult"],
        warm_restarts=resolved["train.warm_restarts"],
    )

    test_kind = resolved["test.kind"]
    if test_kind not in ("RS", "CR", "RC", "IC"):
        raise ConfigurationError(f"test.kind must be RS, CR, RC or IC")
    classes = None
    if resolved["test.classes"] is not None:
        try:
            a, b = (int(p) for p in resolved["test.classes"].split("-"))
        except ValueError as exc:
            raise ConfigurationError(
                f"test.classes must look like A-B, got {resolved['test.classes']!r}"
            ) from exc
        classes = (a, b)

    methods = tuple(
        parse_method(
            tok,
            default_k=resolved["unlearn.k"],
            default_cf_epochs=resolved["unlearn.cf_epochs"],
        )
        for tok in _split_list(resolved["methods"], "methods")
    )
    if not methods:
        raise ConfigurationError("methods list is empty")

    metric_names = set(_split_list(resolved["metrics"], "metrics"))
    bad = metric_names - set(METRIC_ORDER)
    if bad:
        raise ConfigurationError(f"unknown metrics: {', '.join(sorted(bad))}")
    metrics = tuple(m for m in METRIC_ORDER if m in metric_names)
    if not metrics:
        raise ConfigurationError("metrics list is empty")

    try:
        seeds = tuple(int(s) for s in _split_list(resolved["seeds"], "seeds"))
    except ValueError as exc:
        raise ConfigurationError("seeds must be integers") from exc
    if not seeds:
        raise ConfigurationError("need at least one seed")

    output_dir = resolved["output_dir"] or os.environ.get(OUTPUT_DIR_ENV) or "runs"

    return ExperimentConfig(
        dataset=dataset,
        arch_layers=resolved["arch"],
        training=training,
        test_kind=test_kind,
        test_n=resolved["test.n"],
        test_classes=classes,
        test_removed_class=resolved["test.removed_class"],
        methods=methods,
        metrics=metrics,
        seeds=seeds,
        mia_shadow_fraction=resolved["mia.shadow_fraction"],
        mia_repetitions=resolved["mia.repetitions"],
        probe_epochs=resolved["probe.epochs"],
        clamp_comi=resolved["report.clamp_comi"],
        output_dir=output_dir,
        raw_items=tuple(sorted(items.items())),
    )


def _split_list(text, what):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError(f"{what} list is empty")
    return parts


def load_experiment_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return experiment_config_from_items(parse_config_text(fh.read()))


def build_dataset(dataset_config):
    if dataset_config.kind == "synthetic":
        return synth_gaussians(
            dataset_config.num_classes,
            dataset_config.per_class,
            dataset_config.dims,
            dataset_config.center_spread,
            dataset_config.noise_sigma,
            dataset_config.seed,
        )
    return from_idx_files(
        *dataset_config.idx_paths,
        valid_fraction=dataset_config.valid_fraction,
        seed=dataset_config.seed,
    )


# --------------------------------------------------------------------
# records


@dataclass
class MethodRow:
    method: str
    reports: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    # Timings are real measurements, deliberately excluded from the
    # deterministic report payload.
    wall_time_s: float | None = None
    precompute_time_s: float | None = None


@dataclass
class RunRecord:
    seed: int
    test_kind: str
    rows: list
    train_original_s: float | None = None


def record_to_jsonable(record):
    return {
        "seed": record.seed,
        "test": record.test_kind,
        "rows": [
            {
                "method": row.method,
                "failed": row.failed,
                "error": row.error,
                "metrics": [
                    {
                        "metric": rep.metric,
                        "test": record.test_kind,
                        "target": rep.target,
                        "value": rep.value,
                        "unit": rep.unit,
                        "seed": record.seed,
                    }
                    for rep in row.reports
                ],
            }
            for row in record.rows
        ],
    }


def record_from_jsonable(blob):
    rows = [
        MethodRow(
            method=row["method"],
            failed=row["failed"],
            error=row["error"],
            reports=[
                MetricReport(
                    metric=rep["metric"],
                    target=rep["target"],
                    value=rep["value"],
                    unit=rep["unit"],
                )
                for rep in row["metrics"]
            ],
        )
        for row in blob["rows"]
    ]
    return RunRecord(seed=blob["seed"], test_kind=blob["test"], rows=rows)


# --------------------------------------------------------------------
# the pipeline


def _seed_int(seed_seq):
    return int(seed_seq.generate_state(1, np.uint64)[0])


def pick_confused_pair(data, arch, training, probe_epochs, seed):
    """Default IC pair: train a short probe on the clean training data
    and take the class pair with the highest symmetric confusion on held
    out samples (valid split if present, else test).  Ties break toward
    the lexicographically smallest pair."""
    probe_cfg = replace(training, epochs=probe_epochs, seed=seed)
    probe = train(
        init_model(arch, seed), data.view(data.train_indices), probe_cfg
    )
    held = data.valid_indices
    if len(held) == 0:
        held = data.test_indices
    matrix = confusion_matrix(probe, data.features[held], data.labels[held])
    sym = matrix.counts + matrix.counts.T
    best, best_pair = -1, None
    for a in range(data.num_classes):
        for b in range(a + 1, data.num_classes):
            if sym[a, b] > best:
                best, best_pair = sym[a, b], (a, b)
    return best_pair


def _comi_targets(plan, dt_labels):
    """Target class per sample for the membership attack: the manipulated
    label for IC (for unseen samples, the confusion partner of the true
    class); the true label otherwise."""
    if plan.kind == "IC":
        a, b = plan.spec.classes
        member = plan.d_prime.labels[plan.df_indices]
        nonmember = np.where(dt_labels == a, b, a)
    else:
        member = plan.original_labels
        nonmember = dt_labels
    return member, nonmember


def _evaluate_model(model, config, data, plan, dt, mia):
    df_features = plan.d_prime.features[plan.df_indices]
    mem_labels = plan.original_labels
    dt_features, dt_labels = dt.features, dt.labels
    affected = sorted(plan.affected_classes)

    reports = []
    needs_matrices = {"err", "fgt"} & set(config.metrics)
    if needs_matrices:
        mem_matrix = confusion_matrix(model, df_features, mem_labels)
        dt_matrix = confusion_matrix(model, dt_features, dt_labels)
    for metric in config.metrics:
        if metric == "err":
            for target, matrix in (
                ("memorization", mem_matrix),
                ("property_generalization", dt_matrix),
            ):
                reports.append(
                    MetricReport("err", target, err(matrix, affected), "percent")
                )
        elif metric == "fgt":
            for target, matrix in (
                ("memorization", mem_matrix),
                ("property_generalization", dt_matrix),
            ):
                if plan.kind == "CR":
                    value = fgt_removed_class(matrix, plan.spec.removed_class)
                else:
                    value = fgt_confusion(matrix, affected)
                reports.append(MetricReport("fgt", target, value, "count"))
        elif metric == "comi":
            member_t, nonmember_t = _comi_targets(plan, dt_labels)
            value = comi(model, df_features, member_t, dt_features, nonmember_t, mia)
            reports.append(MetricReport("comi", "memorization", value, "percent"))
        else:  # utility
            reports.append(
                MetricReport("utility", "utility", utility_err(model, data, plan),
                             "percent")
            )
    return reports


def run_experiment(config, seed):
    """One deterministic run: returns the per-method metric rows for the
    given seed, ordered original / configured methods / retrain."""
    data = build_dataset(config.dataset)
    data.check_split_coverage()

    init_ss, shuffle_ss, plan_ss, comi_ss, methods_ss = np.random.SeedSequence(
        seed
    ).spawn(5)
    training = replace(config.training, seed=_seed_int(shuffle_ss))
    arch = ArchSpec(config.arch_layers, data.feature_shape, data.num_classes)

    plan_seed_ss, probe_ss = plan_ss.spawn(2)
    classes = config.test_classes
    if config.test_kind == "IC" and classes is None:
        classes = pick_confused_pair(
            data, arch, config.training, config.probe_epochs, _seed_int(probe_ss)
        )
    spec = TestSpec(
        kind=config.test_kind,
        n=config.test_n,
        removed_class=config.test_removed_class if config.test_kind == "CR" else None,
        classes=classes if config.test_kind == "IC" else None,
        seed=_seed_int(plan_seed_ss),
    )
    plan = make_deletion_plan(data, spec)

    start = time.perf_counter()
    original = train(init_model(arch, _seed_int(init_ss)), plan.d_prime, training)
    train_original_s = time.perf_counter() - start

    retain_view, _audit = plan.retain_view(audit="raise")
    dt = dt_for(plan, data)
    mia = MiaConfig(
        shadow_fraction=config.mia_shadow_fraction,
        repetitions=config.mia_repetitions,
        seed=_seed_int(comi_ss),
    )

    def evaluated_row(label, model, wall, pre):
        return MethodRow(
            method=label,
            reports=_evaluate_model(model, config, data, plan, dt, mia),
            wall_time_s=wall,
            precompute_time_s=pre,
        )

    rows = [evaluated_row("original", original, 0.0, 0.0)]
    tail = []
    for method, stream in zip(config.methods, methods_ss.spawn(len(config.methods))):
        try:
            result = apply_method(
                method, original, retain_view, arch, training, _seed_int(stream)
            )
            row = evaluated_row(
                method.label, result.model, result.wall_time_s,
                result.precompute_time_s,
            )
        except (TrainingError, EvaluationError, ConfigurationError, TestSpecError) as exc:
            row = MethodRow(
                method=method.label,
                failed=True,
                error=f"{type(exc).__name__}: {exc}",
            )
        (tail if method.kind == "retrain" else rows).append(row)
    rows.extend(tail)
    return RunRecord(
        seed=seed, test_kind=config.test_kind, rows=rows,
        train_original_s=train_original_s,
    )


def run_many(config, seeds=None, jobs=1):
    """Run all seeds, optionally in parallel; the output order (and the
    reports) are independent of jobs."""
    seeds = list(config.seeds if seeds is None else seeds)
    if jobs <= 1 or len(seeds) <= 1:
        return [run_experiment(config, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: run_experiment(config, s), seeds))


# --------------------------------------------------------------------
# aggregation


@dataclass
class ReportTable:
    methods: list
    columns: list  # (metric, target) pairs
    means: list  # rows x columns, None where no successful seed
    stds: list  # rows x columns, None when fewer than two values
    num_seeds: int


def aggregate(records):
    """Mean and sample (N-1) standard deviation per method and metric
    column across seeds."""
    if not records:
        raise AggregationError("no records to aggregate")
    methods = [row.method for row in records[0].rows]
    columns = None
    for record in records:
        if [row.method for row in record.rows] != methods:
            raise AggregationError("records have mismatched method rows")
        for row in record.rows:
            if row.failed:
                continue
            cols = [(rep.metric, rep.target) for rep in row.reports]
            if columns is None:
                columns = cols
            elif cols != columns:
                raise AggregationError("records have mismatched metric columns")
    if columns is None:
        raise AggregationError("every row failed; nothing to aggregate")

    means, stds = [], []
    for i, _ in enumerate(methods):
        row_means, row_stds = [], []
        for j, _ in enumerate(columns):
            values = [
                record.rows[i].reports[j].value
                for record in records
                if not record.rows[i].failed
            ]
            if not values:
                row_means.append(None)
                row_stds.append(None)
                continue
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if len(values) > 1 else None
            row_means.append(mean)
            row_stds.append(std)
        means.append(row_means)
        stds.append(row_stds)
    return ReportTable(methods, columns, means, stds, num_seeds=len(records))


# --------------------------------------------------------------------
# export


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _column_name(column):
    metric, target = column
    return f"{metric}_{target}"


def _format_cell(mean, std, clamp):
    if mean is None:
        return "-"
    if clamp and mean < 50.0:
        return "<50"
    text = f"{mean:.1f}"
    if std is not None:
        text += f" ± {std:.1f}"
    return text


def render_table_text(table, clamp_comi=False):
    header = ["method"] + [_column_name(c) for c in table.columns]
    body = []
    for i, method in enumerate(table.methods):
        cells = [method]
        for j, column in enumerate(table.columns):
            clamp = clamp_comi and column[0] == "comi"
            cells.append(_format_cell(table.means[i][j], table.stds[i][j], clamp))
        body.append(cells)
    widths = [
        max(len(row[k]) for row in [header] + body) for k in range(len(header))
    ]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in [header] + body
    ]
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


def export(table, records, output_dir, clamp_comi=False, config_items=None):
    """Write report.json (deterministic), table.csv, table.txt and
    timings.csv into output_dir, atomically."""
    os.makedirs(output_dir, exist_ok=True)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": dict(config_items) if config_items else None,
        "records": [record_to_jsonable(r) for r in records],
    }
    payload = json.dumps(report, sort_keys=True, separators=(",", ":")).encode()
    _atomic_write(os.path.join(output_dir, "report.json"), payload)

    lines = ["method," + ",".join(
        f"{_column_name(c)}_mean,{_column_name(c)}_std" for c in table.columns
    )]
    for i, method in enumerate(table.methods):
        cells = [method]
        for j in range(len(table.columns)):
            mean, std = table.means[i][j], table.stds[i][j]
            cells.append("" if mean is None else repr(mean))
            cells.append("" if std is None else repr(std))
        lines.append(",".join(cells))
    _atomic_write(
        os.path.join(output_dir, "table.csv"), ("\n".join(lines) + "\n").encode()
    )

    _atomic_write(
        os.path.join(output_dir, "table.txt"),
        render_table_text(table, clamp_comi).encode(),
    )

    timing_lines = ["seed,method,wall_time_s,precompute_time_s"]
    for record in records:
        if record.train_original_s is not None:
            timing_lines.append(
                f"{record.seed},train_original,{record.train_original_s!r},0.0"
            )
        for row in record.rows:
            if row.wall_time_s is None:
                continue
            timing_lines.append(
                f"{record.seed},{row.method},{row.wall_time_s!r},"
                f"{row.precompute_time_s!r}"
            )
    _atomic_write(
        os.path.join(output_dir, "timings.csv"),
        ("\n".join(timing_lines) + "\n").encode(),
    )


def load_report(path):
    """Read report.json back into run records (timings stay None)."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported report schema {blob.get('schema_version')!r}"
        )
    return [record_from_jsonable(r) for r in blob["records"]]
