"""Batch runs over (seed, method) cells, on-disk artifacts and report tables.

Layout under ``out``::

    <hash>/config.json
    <hash>/<seed>/<method>/{checkpoint.json, train_log.csv, result.json, timing.json}
    <hash>/report.md, <hash>/report.csv

``result.json`` is a pure function of the resolved config, so reruns are
byte-identical. Wall-clock timings go to ``timing.json`` next to it.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .charts import build_atlas
from .errors import ConfigError, EmptyReportError
from .metrics import RunResult, evaluate_run
from .model import TrainConfig, checkpoint_to_json, finetune, train_teacher
from .objective import METHODS, ObjectiveConfig, ScheduleConfig, format_log_csv, get_preset
from .synthetic import BenchmarkConfig, bundle_to_json, make_benchmark

log = logging.getLogger(__name__)

DEFAULTS_VERSION = 1


@dataclass(frozen=True)
class ChartConfig:
    n_charts: int = 8
    rank: int = 2
    tau_c: float = 1.0
    support_q: float = 0.95


def _train(**kw) -> dict:
    return asdict(replace(TrainConfig(), **kw))


# Every default used by a run lives here. Bump DEFAULTS_VERSION on change;
# the version is part of the config hash.
DEFAULTS = {
    "benchmark": asdict(BenchmarkConfig()),
    "model": {"hidden_dims": [64, 32]},
    "chart": asdict(ChartConfig()),
    "objective": asdict(ObjectiveConfig()),
    "teacher": _train(learning_rate=1e-3, epochs=30),
    "finetune": _train(learning_rate=2e-3, epochs=30),
    "methods": list(METHODS),
    "seeds": [7, 8, 9],
    "out": "out",
}
for _section in ("teacher", "finetune"):
    # The per-run seed comes from ``seeds``.
    del DEFAULTS[_section]["seed"]


def _merge(base, override, path="") -> dict:
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(override).__name__}")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where):
    # YAML 1.1 reads "1e-3" as a string; take numeric types from the defaults.
    if isinstance(default, bool) or isinstance(value, bool):
        return value
    try:
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int) and float(value) == int(float(value)):
            return int(float(value))
    except (TypeError, ValueError):
        raise ConfigError(f"{where} expects a number, got {value!r}") from None
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    hidden_dims: tuple = (64, 32)
    chart: ChartConfig = field(default_factory=ChartConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULTS["teacher"]))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULTS["finetune"]))
    methods: tuple = METHODS
    seeds: tuple = (7, 8, 9)
    out: str = "out"

    @classmethod
    def from_dict(cls, doc: dict | None = None) -> "ExperimentConfig":
        """Resolve a partial tree against the defaults; unknown keys raise."""
        tree = _merge(DEFAULTS, doc or {})
        try:
            obj = tree["objective"]
            obj = ObjectiveConfig(**{**obj, "schedule": ScheduleConfig(**obj["schedule"])})
            cfg = cls(
                benchmark=BenchmarkConfig(**tree["benchmark"]),
                hidden_dims=tuple(int(h) for h in tree["model"]["hidden_dims"]),
                chart=ChartConfig(**tree["chart"]),
                objective=obj,
                teacher=TrainConfig(**tree["teacher"]),
                finetune=TrainConfig(**tree["finetune"]),
                methods=tuple(tree["methods"]),
                seeds=tuple(int(s) for s in tree["seeds"]),
                out=str(tree["out"]),
            )
            for m in cfg.methods:
                get_preset(m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not cfg.methods or not cfg.seeds:
            raise ConfigError("methods and seeds must be non-empty")
        if len(set(cfg.methods)) != len(cfg.methods) or len(set(cfg.seeds)) != len(cfg.seeds):
            raise ConfigError("methods and seeds must not repeat")
        return cfg

    def to_dict(self) -> dict:
        teacher, ft = asdict(self.teacher), asdict(self.finetune)
        del teacher["seed"], ft["seed"]
        return {
            "benchmark": asdict(self.benchmark),
            "model": {"hidden_dims": list(self.hidden_dims)},
            "chart": asdict(self.chart),
            "objective": asdict(self.objective),
            "teacher": teacher,
            "finetune": ft,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "out": self.out,
        }

    def config_hash(self) -> str:
        """Short sha256 over the canonical resolved config.

        ``seeds`` and ``methods`` only select cells, which are addressed by
        their own path components, and ``out`` is a location; none of the
        three change what any single cell computes, so they are left out.
        """
        doc = self.to_dict()
        for key in ("out", "seeds", "methods"):
            del doc[key]
        doc["defaults_version"] = DEFAULTS_VERSION
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seeds=None, methods=None, out=None) -> "ExperimentConfig":
        doc = self.to_dict()
        if seeds is not None:
            doc["seeds"] = list(seeds)
        if methods is not None:
            doc["methods"] = list(methods)
        if out is not None:
            doc["out"] = str(out)
        return ExperimentConfig.from_dict(doc)

    @property
    def root(self) -> Path:
        return Path(self.out) / self.config_hash()


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Read a YAML (or JSON) key-value tree; a missing path means all defaults."""
    if path is None:
        return ExperimentConfig.from_dict({})
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return ExperimentConfig.from_dict(doc or {})


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cell_dir(cfg: ExperimentConfig, seed: int, method: str) -> Path:
    return cfg.root / str(seed) / method


def generate(cfg: ExperimentConfig) -> list[Path]:
    """Write one benchmark bundle per seed; nothing is trained."""
    paths = []
    for seed in cfg.seeds:
        path = cfg.root / str(seed) / "bundle.json"
        atomic_write(path, bundle_to_json(make_benchmark(cfg.benchmark, seed)))
        paths.append(path)
    return paths


@dataclass
class RunOutcome:
    root: Path
    table: "ReportTable | None"
    failures: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 0 if not self.failures else 1


def _seed_context(cfg: ExperimentConfig, seed: int):
    bundle = make_benchmark(cfg.benchmark, seed)
    teacher = train_teacher(bundle, replace(cfg.teacher, seed=seed), cfg.hidden_dims)
    fit = build_atlas(teacher.anchor_features, cfg.chart.n_charts, cfg.chart.rank, cfg.chart.tau_c, seed)
    return bundle, teacher, fit


def _run_cell(cfg, seed, method, ctx, digest) -> RunResult:
    bundle, teacher, fit = ctx
    start = time.perf_counter()
    student, rows = finetune(teacher, bundle, fit, cfg.objective, replace(cfg.finetune, seed=seed), method)
    result = evaluate_run(teacher.model, student, bundle, fit.atlas, cfg.chart.support_q, method, seed)
    where = cell_dir(cfg, seed, method)
    atomic_write(where / "checkpoint.json", checkpoint_to_json(student, seed, digest))
    atomic_write(where / "train_log.csv", format_log_csv(rows, digest))
    # result.json last: its presence marks the cell complete.
    atomic_write(where / "result.json", result.to_json(digest))
    timing = {"seconds": round(time.perf_counter() - start, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    atomic_write(where / "timing.json", json.dumps(timing) + "\n")
    return result


def run_experiment(cfg: ExperimentConfig) -> RunOutcome:
    """Run every missing (seed, method) cell, then rewrite the report.

    Cells with an existing ``result.json`` are skipped. A failure in one cell
    is written to its ``error.txt`` and does not stop the others.
    """
    digest = cfg.config_hash()
    root = cfg.root
    atomic_write(root / "config.json", json.dumps({"config_hash": digest, **cfg.to_dict()}, indent=2,
                                                  sort_keys=True) + "\n")
    failures = {}
    for seed in cfg.seeds:
        todo = [m for m in cfg.methods if not (cell_dir(cfg, seed, m) / "result.json").exists()]
        if not todo:
            continue
        try:
            ctx = _seed_context(cfg, seed)
        except Exception as exc:  # recorded per cell, run continues
            for m in todo:
                failures[(seed, m)] = _record_failure(cfg, seed, m, exc)
            continue
        for m in todo:
            log.info("seed %d method %s", seed, m)
            try:
                _run_cell(cfg, seed, m, ctx, digest)
                err = cell_dir(cfg, seed, m) / "error.txt"
                if err.exists():
                    err.unlink()
            except Exception as exc:
                failures[(seed, m)] = _record_failure(cfg, seed, m, exc)
    table = None
    try:
        table = emit_report(root)
    except EmptyReportError:
        pass
    return RunOutcome(root, table, failures)


def _record_failure(cfg, seed, method, exc) -> str:
    msg = f"{type(exc).__name__}: {exc}"
    log.error("seed %d method %s failed: %s", seed, method, msg)
    atomic_write(cell_dir(cfg, seed, method) / "error.txt",
                 "".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
    return msg


# -- reports ---------------------------------------------------------------

COLUMNS = ("Method", "Seed", "Old After", "New After", "Harmonic Mean", "Anchor CKA", "Anchor Dist. Corr.",
           "Old Before", "Forgetting", "Support In")
_FIELDS = ("old_after", "new_after", "harmonic_mean", "cka", "dist_corr", "old_before", "forgetting",
           "support_in")
MEAN_LABEL = "mean"


def _fmt(x: float) -> str:
    return f"{x:.4f}"


@dataclass(frozen=True)
class ReportTable:
    """Per-run rows plus a per-method mean, recomputed on every access."""

    results: tuple

    def __post_init__(self):
        order = {m: i for i, m in enumerate(METHODS)}
        ranked = sorted(self.results, key=lambda r: (order.get(r.method, len(order)), r.method, r.seed))
        object.__setattr__(self, "results", tuple(ranked))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.results))

    def mean(self, method: str) -> dict:
        runs = [r for r in self.results if r.method == method]
        if not runs:
            raise KeyError(method)
        return {f: sum(getattr(r, f) for r in runs) / len(runs) for f in _FIELDS}

    def rows(self) -> list[list]:
        out = []
        for m in self.methods:
            for r in self.results:
                if r.method == m:
                    out.append([m, str(r.seed), *(getattr(r, f) for f in _FIELDS)])
            mean = self.mean(m)
            out.append([m, MEAN_LABEL, *(mean[f] for f in _FIELDS)])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows():
            writer.writerow([row[0], row[1], *map(_fmt, row[2:])])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "|".join(["---"] * 2 + ["---:"] * len(_FIELDS)) + "|"]
        for row in self.rows():
            cells = [row[0], row[1], *map(_fmt, row[2:])]
            if row[1] == MEAN_LABEL:
                cells = [f"**{c}**" for c in cells]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[list]:
    """Inverse of ``ReportTable.to_csv`` up to the 4-decimal rounding."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ConfigError(f"unexpected report header {header}")
    return [[row[0], row[1], *map(float, row[2:])] for row in reader]


def collect_results(results_dir, seeds=None, methods=None) -> list[RunResult]:
    results = []
    for path in sorted(Path(results_dir).glob("*/*/result.json")):
        r = RunResult.from_json(path.read_text())
        if (seeds is None or r.seed in seeds) and (methods is None or r.method in methods):
            results.append(r)
    return results


def emit_report(results_dir, seeds=None, methods=None) -> ReportTable:
    """Aggregate ``result.json`` files below ``results_dir`` into report.{md,csv}."""
    results = collect_results(results_dir, seeds, methods)
    if not results:
        raise EmptyReportError(f"no result.json files under {results_dir}")
    table = ReportTable(tuple(results))
    root = Path(results_dir)
    atomic_write(root / "report.csv", table.to_csv())
    atomic_write(root / "report.md", table.to_markdown())
    return table
