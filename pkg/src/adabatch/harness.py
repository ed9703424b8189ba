"""Experiment configs, runs, metrics files and summary tables.

A config is one YAML file::

    name: quad_eta_sweep
    out_dir: runs/quad
    seeds: [0, 1]
    sample_budget: 200000
    objective: {kind: quadratic, n: 4096, d: 32}
    defaults: {workers: 4, accumulation_steps: 1, initial_batch: 16}
    variants:
      - {name: eta0.2, eta: 0.2}
      - {name: b1024, schedule: {constant: 1024}}
      - {name: stagewise, schedule: {stagewise: [[0.025, 64], [0.025, 128], [0.95, 256]]}}

Keys under ``defaults`` and in each variant are the train settings listed
in ``TRAIN_KEYS``; omitted values fall back to ``TRAIN_DEFAULTS``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .batch_controller import NormTestConfig
from .objectives import save_dataset
from .optim import AdamConfig, LrSchedule
from .trainer import CostModel, ObjectiveSpec, RunMetrics, StepRecord, TrainConfig, run_training

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "samples", "batch_size", "lr", "train_loss", "grad_norm",
    "test_statistic", "val_loss", "elapsed_seconds",
)

TRAIN_DEFAULTS: dict[str, Any] = {
    "workers": 4,
    "accumulation_steps": 16,
    "initial_batch": 256,
    "max_global_batch": 8192,
    "eta": 0.2,
    "test_interval": 1,
    "finite_population_correction": False,
    "grad_norm_floor": 1e-12,
    "variance_scale": "as_written",
    "schedule": "adaptive",
    "peak_lr": 4e-4,
    "min_lr": 4e-5,
    "warmup_samples": None,  # 1% of the sample budget
    "beta1": 0.9,
    "beta2": 0.95,
    "eps": 1e-8,
    "weight_decay": 0.1,
    "grad_clip": 1.0,
    "optimizer_form": "adamw",
    "v0": 1.0,
    "parallel_mode": "replicated",
    "scheduler": "threads",
    "val_interval": 10,
    "clock": "simulated",
    "step_latency": 1e-3,
    "sample_cost": 1e-5,
    "collective_latency": 2e-4,
    "debug_recheck": False,
}
TRAIN_KEYS = frozenset(TRAIN_DEFAULTS)
OBJECTIVE_KEYS = frozenset(ObjectiveSpec.__dataclass_fields__)
TOP_KEYS = frozenset({"name", "out_dir", "seeds", "sample_budget", "objective", "defaults", "variants"})


class ConfigError(ValueError):
    """Invalid experiment config; the message names the key and constraint."""


@dataclass
class ExperimentSpec:
    name: str
    variants: list[tuple[str, TrainConfig]]
    out_dir: Path
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class SummaryRow:
    scheme: str
    seed: str
    steps: float
    avg_batch: float
    time: float
    best_loss: float
    best_val_loss: float | None

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: RunMetrics | None
    summary: SummaryRow | None
    error: str | None = None


# -- config ------------------------------------------------------------------------

def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _parse_schedule(value, where: str) -> dict:
    if value == "adaptive":
        return {"schedule_mode": "adaptive"}
    if isinstance(value, dict) and len(value) == 1:
        (mode, arg), = value.items()
        if mode == "constant":
            return {"schedule_mode": "constant", "constant_batch": int(arg)}
        if mode == "stagewise":
            try:
                stages = tuple((float(f), int(b)) for f, b in arg)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}.schedule.stagewise: expected a list of [fraction, batch] pairs") from exc
            return {"schedule_mode": "stagewise", "stages": stages}
    raise ConfigError(f"{where}.schedule: expected 'adaptive', {{constant: b}} or {{stagewise: [[f, b], ...]}}")


def build_train_config(settings: dict, objective: ObjectiveSpec, budget: int, seed: int = 0,
                       where: str = "variant") -> TrainConfig:
    """Validate flat train ``settings`` and assemble a :class:`TrainConfig`."""
    _reject_unknown(settings, TRAIN_KEYS, where)
    s = {**TRAIN_DEFAULTS, **settings}
    eta = s["eta"]
    if not isinstance(eta, (int, float)) or not 0.0 < eta < 1.0:
        raise ConfigError(f"{where}.eta: must lie in the open interval (0, 1), got {eta!r}")
    for key in ("workers", "accumulation_steps", "initial_batch", "max_global_batch", "test_interval", "val_interval"):
        if not isinstance(s[key], int) or s[key] < 1:
            raise ConfigError(f"{where}.{key}: must be a positive integer, got {s[key]!r}")
    grid = s["workers"] * s["accumulation_steps"]
    if s["initial_batch"] % grid:
        raise ConfigError(f"{where}.initial_batch: {s['initial_batch']} is not divisible by workers*accumulation_steps = {grid}")
    if s["max_global_batch"] % grid:
        raise ConfigError(f"{where}.max_global_batch: {s['max_global_batch']} is not divisible by workers*accumulation_steps = {grid}")
    warmup = budget // 100 if s["warmup_samples"] is None else s["warmup_samples"]
    theory = s["optimizer_form"] == "theory"
    try:
        norm_test = NormTestConfig(
            eta=float(eta), test_interval=s["test_interval"], max_global_batch=s["max_global_batch"],
            finite_population_correction=bool(s["finite_population_correction"]),
            grad_norm_floor=float(s["grad_norm_floor"]), variance_scale=s["variance_scale"],
        )
        adam = AdamConfig(
            alpha=float(s["peak_lr"]), beta1=float(s["beta1"]), beta2=float(s["beta2"]),
            eps=0.0 if theory else float(s["eps"]), weight_decay=0.0 if theory else float(s["weight_decay"]),
            clip_norm=None if s["grad_clip"] in (None, 0) else float(s["grad_clip"]),
            form=s["optimizer_form"], v0=float(s["v0"]),
        )
        sched = LrSchedule(float(s["peak_lr"]), float(s["min_lr"]), int(warmup), int(budget))
        return TrainConfig(
            objective=objective, workers=s["workers"], accumulation_steps=s["accumulation_steps"],
            initial_batch=s["initial_batch"], norm_test=norm_test, adam=adam, lr_schedule=sched,
            sample_budget=int(budget), parallel_mode=s["parallel_mode"], seed=seed,
            val_interval=s["val_interval"], scheduler=s["scheduler"], clock=s["clock"],
            cost_model=CostModel(float(s["step_latency"]), float(s["sample_cost"]), float(s["collective_latency"])),
            debug_recheck=bool(s["debug_recheck"]),
            **_parse_schedule(s["schedule"], where),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def spec_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    _reject_unknown(raw, TOP_KEYS, "config")
    for key in ("objective", "sample_budget"):
        if key not in raw:
            raise ConfigError(f"config: missing required key {key!r}")
    obj_raw = raw["objective"]
    if not isinstance(obj_raw, dict) or "kind" not in obj_raw:
        raise ConfigError("objective: must be a mapping with at least 'kind'")
    _reject_unknown(obj_raw, OBJECTIVE_KEYS, "objective")
    objective = ObjectiveSpec(**obj_raw)
    budget = raw["sample_budget"]
    if not isinstance(budget, int) or budget < 1:
        raise ConfigError(f"sample_budget: must be a positive integer, got {budget!r}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    defaults = raw.get("defaults", {}) or {}
    _reject_unknown(defaults, TRAIN_KEYS, "defaults")
    variants_raw = raw.get("variants") or [{"name": "adaptive"}]
    variants = []
    seen = set()
    for i, v in enumerate(variants_raw):
        if not isinstance(v, dict) or "name" not in v:
            raise ConfigError(f"variants[{i}]: must be a mapping with a 'name'")
        name = str(v["name"])
        if name in seen:
            raise ConfigError(f"variants[{i}].name: duplicate variant name {name!r}")
        seen.add(name)
        settings = {**defaults, **{k: val for k, val in v.items() if k != "name"}}
        variants.append((name, build_train_config(settings, objective, budget, where=f"variants[{i}]")))
    name = str(raw.get("name", "experiment"))
    out = Path(raw.get("out_dir", f"runs/{name}"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return ExperimentSpec(name, variants, out, list(seeds))


def parse_config(path) -> ExperimentSpec:
    """Load and validate a YAML experiment config."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    return spec_from_dict(raw)


# -- metrics files ------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_metrics(metrics: RunMetrics, path) -> Path:
    """Write one CSV row per step; absent periodic values are empty cells."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for rec in metrics.records:
                writer.writerow([_fmt(getattr(rec, c)) for c in METRIC_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path) -> RunMetrics:
    ints = {"step", "samples", "batch_size"}
    out = RunMetrics()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        for row in reader:
            vals = {}
            for c in METRIC_COLUMNS:
                cell = row[c]
                vals[c] = None if cell == "" else (int(cell) if c in ints else float(cell))
            out.records.append(StepRecord(**vals))
    return out


# -- summaries ---------------------------------------------------------------------

def summarize_run(metrics: RunMetrics, scheme: str, seed) -> SummaryRow:
    recs = metrics.records
    if not recs:
        raise ValueError("cannot summarize an empty run")
    vals = [r.val_loss for r in recs if r.val_loss is not None]
    return SummaryRow(
        scheme=scheme, seed=str(seed), steps=len(recs), avg_batch=recs[-1].samples / len(recs),
        time=recs[-1].elapsed_seconds, best_loss=min(r.train_loss for r in recs),
        best_val_loss=min(vals) if vals else None,
    )


def _mean_row(rows: list[SummaryRow]) -> SummaryRow:
    def mean(xs):
        xs = [x for x in xs if x is not None]
        return sum(xs) / len(xs) if xs else None
    return SummaryRow(rows[0].scheme, "mean", mean(r.steps for r in rows), mean(r.avg_batch for r in rows),
                      mean(r.time for r in rows), mean(r.best_loss for r in rows),
                      mean(r.best_val_loss for r in rows))


def summarize(runs: list[tuple[str, Any, RunMetrics]]) -> list[SummaryRow]:
    """One row per (variant, seed), plus a seed-mean row for each variant run on several seeds."""
    if not runs:
        raise ValueError("need at least one completed run")
    rows: list[SummaryRow] = []
    by_variant: dict[str, list[SummaryRow]] = {}
    for variant, seed, metrics in runs:
        row = summarize_run(metrics, variant, seed)
        rows.append(row)
        by_variant.setdefault(variant, []).append(row)
    for variant, vrows in by_variant.items():
        if len(vrows) > 1:
            rows.append(_mean_row(vrows))
    return rows


def render_table(rows: list[SummaryRow]) -> str:
    header = f"{'scheme':<20} {'seed':>5} {'steps':>8} {'bsz.':>9} {'time':>9} {'loss':>9} {'val loss':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        val = "-" if r.best_val_loss is None else f"{r.best_val_loss:.4f}"
        lines.append(f"{r.scheme:<20} {r.seed:>5} {r.steps:>8.0f} {r.avg_batch:>9.1f} {r.time:>9.3f} "
                     f"{r.best_loss:>9.4f} {val:>9}")
    return "\n".join(lines)


def write_summary(rows: list[SummaryRow], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.csv"
    names = list(SummaryRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for r in rows:
            writer.writerow([_fmt(getattr(r, n)) for n in names])
    (out_dir / "summary.txt").write_text(render_table(rows) + "\n")
    return path


def collect_runs(out_dir) -> list[tuple[str, str, RunMetrics]]:
    """Find ``<variant>/seed<S>/metrics.csv`` files under ``out_dir``."""
    runs = []
    for path in sorted(Path(out_dir).glob("*/seed*/metrics.csv")):
        runs.append((path.parent.parent.name, path.parent.name[len("seed"):], read_metrics(path)))
    return runs


def summarize_dir(out_dir) -> list[SummaryRow]:
    rows = summarize(collect_runs(out_dir))
    write_summary(rows, out_dir)
    return rows


# -- experiment driver ----------------------------------------------------------------

def _override(spec: ExperimentSpec, seeds=None, workers=None, out_dir=None) -> ExperimentSpec:
    variants = spec.variants
    if workers is not None:
        variants = []
        for name, cfg in spec.variants:
            try:
                variants.append((name, replace(cfg, workers=workers)))
            except ValueError as exc:
                raise ConfigError(f"--workers {workers} is invalid for variant {name!r}: {exc}") from exc
    return ExperimentSpec(spec.name, variants, Path(out_dir) if out_dir else spec.out_dir,
                          list(seeds) if seeds is not None else spec.seeds)


def run_experiment(spec: ExperimentSpec) -> list[RunResult]:
    """Run every variant for every seed, persisting per-run metrics and a summary.

    Failed runs are recorded with their error and do not stop the others.
    All variants of a seed train on the very same dataset object, which is
    also saved once under ``datasets/``.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: list[RunResult] = []
    objective_spec = spec.variants[0][1].objective
    for seed in spec.seeds:
        objective, holdout = objective_spec.build(seed)
        (out / "datasets").mkdir(exist_ok=True)
        ds_path = save_dataset(objective.dataset, out / "datasets" / f"seed{seed}.csv")
        digest = hashlib.sha256(ds_path.read_bytes()).hexdigest()
        for name, cfg in spec.variants:
            cfg = replace(cfg, seed=seed)
            run_dir = out / name / f"seed{seed}"
            t0 = time.perf_counter()
            try:
                metrics = run_training(cfg, objective, holdout)
            except Exception as exc:  # recorded, remaining runs continue
                log.error("run %s seed %d failed: %s", name, seed, exc)
                results.append(RunResult(name, seed, None, None, f"{type(exc).__name__}: {exc}"))
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
                continue
            wall = time.perf_counter() - t0
            emit_metrics(metrics, run_dir / "metrics.csv")
            (run_dir / "run.json").write_text(json.dumps(
                {"variant": name, "seed": seed, "dataset_sha256": digest, "wall_seconds": wall}, indent=2) + "\n")
            results.append(RunResult(name, seed, metrics, summarize_run(metrics, name, seed)))
    done = [(r.variant, r.seed, r.metrics) for r in results if r.metrics is not None]
    if done:
        write_summary(summarize(done), out)
    return results
