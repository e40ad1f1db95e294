"""Experiment grid: run matrix, AA -> AA-focused derivation, aggregation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .adapters import (AAFocused, AdapterConfig, AdapterDrop, AdapterModel, AdapterVariant, ArchitectureSpec,
                       LastK, make_sim_spec, variant_from_dict, variant_to_dict)
from .backbone import BackboneConfig, ConfigError, build_backbone, pretrain_masked
from .checkpoint import save_checkpoint
from .data import UNK, Dataset, generate_synthetic_task, heldout_indices, load_tsv, make_split, setting_label
from .training import RunResult, TrainConfig, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SEEDS = (42, 92, 111, 245, 651)
OUTPUT_ROOT_ENV = "AA_OUTPUT_ROOT"
SUMMARY_COLUMNS = ("task", "variant", "setting", "seed_count", "mean", "std",
                   "mean_selected_layers", "trainable_params")
DERIVED_FOCUSED = ("spec", "uni", "sim")
DERIVED_DROP = ("aa", "uni")


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "keyword-topic"
    size: int = 1000
    seed: int = 0
    path: str | None = None
    text_columns: tuple[str, ...] = ("sentence",)
    label_column: str = "label"
    delimiter: str = "\t"
    metric: str = "accuracy"

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if "text_columns" in d:
            tc = d["text_columns"]
            d["text_columns"] = (tc,) if isinstance(tc, str) else tuple(tc)
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad task entry {d}: {e}") from None

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["text_columns"] = list(self.text_columns)
        return out


@lru_cache(maxsize=16)
def load_task(task: TaskSpec, vocab_size: int, max_seq_len: int) -> Dataset:
    if task.kind == "tsv":
        if not task.path:
            raise ConfigError(f"task {task.name!r}: tsv tasks need a path")
        return load_tsv(task.path, list(task.text_columns), task.label_column, task.delimiter,
                        vocab_size, max_seq_len, task.name, task.metric)
    return generate_synthetic_task(task.kind, task.size, vocab_size, task.seed, max_seq_len, task_id=task.name)


_build_backbone_cached = lru_cache(maxsize=4)(build_backbone)


@lru_cache(maxsize=4)
def encoder_for(cfg: BackboneConfig, task: TaskSpec, test_fraction: float):
    """The frozen encoder for a task; pretext-pretrained on the task's non-test inputs if requested."""
    if cfg.pretrain_steps == 0:
        return _build_backbone_cached(cfg)
    dataset = load_task(task, cfg.vocab_size, cfg.max_seq_len)
    rows = np.setdiff1d(np.arange(len(dataset)), heldout_indices(dataset, test_fraction))
    enc = build_backbone(cfg)
    pretrain_masked(enc, dataset.ids[rows], dataset.mask[rows], cfg.pretrain_steps, cfg.pretrain_lr,
                    cfg.pretrain_mask_rate, mask_token=UNK, seed=cfg.backbone_seed)
    return enc


def _variant_entry_name(entry: dict) -> str:
    if entry.get("name"):
        return str(entry["name"])
    kind, derive = entry.get("kind"), entry.get("derive")
    if derive:
        return f"{kind}_{derive}"
    if kind == "aa_focused":
        return "aa_focused_" + "-".join(map(str, sorted(entry.get("layers", []))))
    if kind == "adapterdrop":
        return f"adapterdrop_drop{entry.get('infer_drop', 0)}"
    if kind == "last_k":
        return f"last{entry.get('k', 0)}_{entry.get('activation', 'relu')}"
    return str(kind)


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    variants: list[dict]
    data_settings: list[int | None] = field(default_factory=lambda: [None])
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    optimizer: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "aa_runs"
    workers: int = 1
    test_fraction: float = 0.2
    uni_source: dict | None = None
    save_checkpoints: bool = True

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("config lists no tasks")
        if not self.variants:
            raise ConfigError("config lists no variants")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        self.variants = [dict(v, name=_variant_entry_name(v)) for v in self.variants]
        vnames = [v["name"] for v in self.variants]
        if len(set(vnames)) != len(vnames):
            raise ConfigError(f"duplicate variant names: {vnames}")
        for v in self.variants:
            derive = v.get("derive")
            if derive is None:
                variant_from_dict({k: x for k, x in v.items() if k != "name"})
            elif (v.get("kind"), derive) not in {("aa_focused", m) for m in DERIVED_FOCUSED} | {
                    ("adapterdrop", m) for m in DERIVED_DROP}:
                raise ConfigError(f"cannot derive {v.get('kind')!r} with mode {derive!r}")
        if any(v.get("derive") for v in self.variants) and not self.aa_variant_name():
            raise ConfigError("derived variants need an 'aa' variant in the same config")
        for n in self.data_settings:
            if n is not None and n < 4:
                raise ConfigError(f"low-data setting {n} too small")
        if not self.seeds:
            raise ConfigError("config lists no seeds")

    def aa_variant_name(self) -> str | None:
        for v in self.variants:
            if v.get("kind") == "aa" and not v.get("derive"):
                return v["name"]
        return None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["tasks"] = [TaskSpec.from_dict(t) for t in d.get("tasks", [])]
            if "backbone" in d:
                d["backbone"] = BackboneConfig.from_dict(d["backbone"])
            if "adapter" in d:
                d["adapter"] = AdapterConfig.from_dict(d["adapter"])
            if "optimizer" in d:
                d["optimizer"] = TrainConfig.from_dict(d["optimizer"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "tasks": [t.to_dict() for t in self.tasks],
            "variants": self.variants,
            "data_settings": list(self.data_settings),
            "seeds": list(self.seeds),
            "backbone": self.backbone.to_dict(),
            "adapter": self.adapter.to_dict(),
            "optimizer": vars(self.optimizer).copy(),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "test_fraction": self.test_fraction,
            "uni_source": self.uni_source,
            "save_checkpoints": self.save_checkpoints,
        }

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not out.is_absolute() and root:
            out = Path(root) / out
        return out


# --------------------------------------------------------------------------
# single runs


@dataclass
class RunJob:
    task: TaskSpec
    variant_name: str
    variant: dict
    low_data_n: int | None
    seed: int
    backbone: dict
    adapter: dict
    optimizer: dict
    test_fraction: float
    output_dir: str
    save_checkpoint: bool = True

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.task.name, self.variant_name, setting_label(self.low_data_n), self.seed)


def _safe(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", s)


def run_filename(task: str, variant: str, setting: str, seed: int) -> str:
    return f"{_safe(task)}__{_safe(variant)}__{setting}__s{seed}"


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def execute_run(job: RunJob) -> RunResult:
    """Train one (task, variant, setting, seed) and write its result file."""
    backbone_cfg = BackboneConfig.from_dict(job.backbone)
    task, setting, seed = job.task, setting_label(job.low_data_n), job.seed
    try:
        dataset = load_task(task, backbone_cfg.vocab_size, backbone_cfg.max_seq_len)
        split = make_split(dataset, job.low_data_n, seed, job.test_fraction)
        model = AdapterModel(encoder_for(backbone_cfg, task, job.test_fraction), variant_from_dict(job.variant),
                             AdapterConfig.from_dict(job.adapter), dataset.num_classes, seed)
        result = train(model, dataset, split, TrainConfig.from_dict(job.optimizer), seed, job.variant_name)
    except Exception as e:  # a failed run is recorded; the batch keeps going
        log.exception("run %s failed", job.key)
        result = RunResult(task.name, job.variant_name, seed, setting, status="failed",
                           error=f"{type(e).__name__}: {e}", variant_params=job.variant)
        model = None
    stem = run_filename(*job.key)
    out = Path(job.output_dir)
    if model is not None and job.save_checkpoint and result.status == "ok":
        save_checkpoint(out / "checkpoints" / stem, model, {"run": stem})
    payload = {"schema_version": SCHEMA_VERSION, "run": result.to_dict(),
               "config": {"backbone": job.backbone, "adapter": job.adapter, "optimizer": job.optimizer,
                          "task": task.to_dict(), "test_fraction": job.test_fraction}}
    _atomic_write_text(out / "runs" / f"{stem}.json", json.dumps(payload, indent=1, sort_keys=True))
    return result


def read_run_file(path) -> RunResult:
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: run-file schema {data.get('schema_version')} != {SCHEMA_VERSION}")
    return RunResult.from_dict(data["run"])


def load_results(output_dir) -> list[RunResult]:
    runs = Path(output_dir) / "runs"
    return [read_run_file(p) for p in sorted(runs.glob("*.json"))] if runs.is_dir() else []


def _execute_all(jobs: list[RunJob], workers: int) -> list[RunResult]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(execute_run, jobs))
    return [execute_run(j) for j in jobs]


def _completed(path: Path) -> RunResult | None:
    if not path.exists():
        return None
    try:
        res = read_run_file(path)
    except (SchemaError, json.JSONDecodeError, KeyError):
        return None
    return res if res.status == "ok" else None


# --------------------------------------------------------------------------
# derivation of AA-focused and AdapterDrop counterparts


def parse_setting(label: str) -> int | None:
    return None if label == "full" else int(label[1:])


def _setting_order(label: str) -> float:
    n = parse_setting(label)
    return math.inf if n is None else n


def index_results(results: Iterable[RunResult], variant: str) -> dict[tuple[str, str, int], RunResult]:
    return {(r.task_id, r.data_setting, r.seed): r for r in results
            if r.variant == variant and r.status == "ok"}


def uni_source_key(aa_runs: dict[tuple[str, str, int], RunResult], task_order: list[str],
                   source_seed: int) -> tuple[str, str, int]:
    """Smallest selected set at the smallest data setting for the source seed; ties by task order."""
    cands = [k for k in aa_runs if k[2] == source_seed]
    if not cands:
        raise KeyError(f"no AA run with seed {source_seed} to derive a shared architecture from")
    smallest = min(_setting_order(k[1]) for k in cands)
    cands = [k for k in cands if _setting_order(k[1]) == smallest]
    rank = {t: i for i, t in enumerate(task_order)}
    return min(cands, key=lambda k: (len(aa_runs[k].selected_layers or []), rank.get(k[0], len(rank)), k[0]))


def _spec_of(run: RunResult) -> ArchitectureSpec:
    if run.architecture is None:
        raise KeyError(f"run {(run.task_id, run.data_setting, run.seed)} has no stored architecture")
    return ArchitectureSpec.from_dict(run.architecture)


def derive_focused(mode: str, aa_runs: dict[tuple[str, str, int], RunResult],
                   targets: list[tuple[str, str]], source_seed: int = 42,
                   uni_source: tuple[str, str, int] | None = None,
                   task_order: list[str] | None = None) -> dict[tuple[str, str], AdapterVariant]:
    """AA-focused variants per (task, setting) target.

    spec: each target's own AA run at ``source_seed``.
    uni: one source run's layer set for every target.
    sim: the last k layers, k = size of the uni source's set.
    """
    if mode not in DERIVED_FOCUSED:
        raise ValueError(f"unknown derive mode {mode!r}")
    out: dict[tuple[str, str], AdapterVariant] = {}
    if mode == "spec":
        for task, setting in targets:
            key = (task, setting, source_seed)
            if key not in aa_runs:
                raise KeyError(f"missing AA source run (task={task}, setting={setting}, seed={source_seed})")
            out[(task, setting)] = _spec_of(aa_runs[key]).focused_variant()
    else:
        key = tuple(uni_source) if uni_source else uni_source_key(aa_runs, task_order or [], source_seed)
        if key not in aa_runs:
            raise KeyError(f"missing AA source run (task={key[0]}, setting={key[1]}, seed={key[2]})")
        spec = _spec_of(aa_runs[key])
        if mode == "uni":
            variant = spec.focused_variant()
        else:
            sim = make_sim_spec(len(spec), spec.total_layers)
            variant = LastK(len(sim), "rational")
        out = {t: variant for t in targets}
    for t, v in out.items():
        if (isinstance(v, AAFocused) and not v.layers) or (isinstance(v, LastK) and v.k == 0):
            log.warning("derived %s architecture for %s selects no layers: backbone + head only", mode, t)
    return out


def derive_adapterdrop_counterparts(focused: dict[tuple[str, str], AdapterVariant], total_layers: int,
                                    fixed_k: int | None = None) -> dict[str, dict[tuple[str, str], AdapterDrop]]:
    """AdapterDrop variants whose inference layer count matches each focused architecture.

    Returns ``{"aa": per-target variants, "uni": per-target variants with fixed_k layers}``.
    """
    def count(v):
        return len(v.layers) if isinstance(v, AAFocused) else v.k

    out = {"aa": {t: AdapterDrop(None, total_layers - count(v)) for t, v in focused.items()}}
    if fixed_k is not None:
        out["uni"] = {t: AdapterDrop(None, total_layers - fixed_k) for t in focused}
    return out


# --------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateRow:
    task: str
    variant: str
    setting: str
    seed_count: int
    mean: float
    std: float
    mean_selected_layers: float
    trainable_params: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in SUMMARY_COLUMNS)


@dataclass
class AggregateReport:
    rows: list[AggregateRow]
    incomplete: list[dict]

    def row(self, task: str, variant: str, setting: str) -> AggregateRow:
        for r in self.rows:
            if (r.task, r.variant, r.setting) == (task, variant, setting):
                return r
        raise KeyError((task, variant, setting))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "std_kind": "population",
                "rows": [vars(r) for r in self.rows], "incomplete": self.incomplete}


def aggregate(results: Iterable[RunResult]) -> AggregateReport:
    groups: dict[tuple[str, str, str], list[RunResult]] = {}
    incomplete = []
    for r in results:
        if r.status != "ok":
            incomplete.append({"task": r.task_id, "variant": r.variant, "setting": r.data_setting,
                               "seed": r.seed, "error": r.error})
            continue
        groups.setdefault((r.task_id, r.variant, r.data_setting), []).append(r)
    rows = []
    for (task, variant, setting), rs in sorted(groups.items()):
        m = np.array([r.test_metric for r in rs], dtype=np.float64)
        rows.append(AggregateRow(task, variant, setting, len(rs), float(m.mean()), float(m.std(ddof=0)),
                                 float(np.mean([len(r.inference_layers) for r in rs])),
                                 float(np.mean([r.trainable_param_count for r in rs]))))
    _log_data_monotonicity(rows)
    return AggregateReport(rows, incomplete)


def _log_data_monotonicity(rows: list[AggregateRow]) -> None:
    by = {}
    for r in rows:
        by.setdefault((r.task, r.variant), []).append(r)
    for (task, variant), rs in by.items():
        rs = sorted(rs, key=lambda r: _setting_order(r.setting))
        for a, b in zip(rs, rs[1:]):
            if b.mean < a.mean:
                log.info("%s/%s: mean drops from %s (%.4f) to %s (%.4f)", task, variant,
                         a.setting, a.mean, b.setting, b.mean)


def summary_csv_text(report: AggregateReport) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}; std=population (ddof=0)\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in report.rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r.as_tuple()])
    return buf.getvalue()


def read_summary_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_report(output_dir, results: list[RunResult] | None = None, figures: bool = True) -> AggregateReport:
    out = Path(output_dir)
    results = load_results(out) if results is None else results
    report = aggregate(results)
    _atomic_write_text(out / "summary.csv", summary_csv_text(report))
    _atomic_write_text(out / "aggregate.json", json.dumps(report.to_dict(), indent=1, sort_keys=True))
    if figures and report.rows:
        from .plotting import plot_summary
        plot_summary(report, out / "figures")
    return report


# --------------------------------------------------------------------------
# the run matrix


@dataclass
class ExperimentOutcome:
    results: list[RunResult]
    report: AggregateReport
    executed: int
    derived: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[RunResult]:
        return [r for r in self.results if r.status != "ok"]


def _job(cfg: ExperimentConfig, out: Path, task: TaskSpec, name: str, variant: dict,
         n: int | None, seed: int) -> RunJob:
    return RunJob(task, name, variant, n, seed, cfg.backbone.to_dict(), cfg.adapter.to_dict(),
                  vars(cfg.optimizer).copy(), cfg.test_fraction, str(out), cfg.save_checkpoints)


def expand_jobs(cfg: ExperimentConfig, out: Path, entries: list[dict],
                resolve=None) -> list[RunJob]:
    """Cartesian product task x variant x setting x seed, in config order."""
    jobs = []
    for task in cfg.tasks:
        for entry in entries:
            for n in cfg.data_settings:
                if resolve is None:
                    variant = variant_to_dict(variant_from_dict(entry))
                else:
                    variant = variant_to_dict(resolve(entry, task.name, setting_label(n)))
                for seed in cfg.seeds:
                    jobs.append(_job(cfg, out, task, entry["name"], variant, n, seed))
    return jobs


def _run_jobs(jobs: list[RunJob], workers: int) -> tuple[list[RunResult], int]:
    done, todo = {}, []
    for j in jobs:
        prev = _completed(Path(j.output_dir) / "runs" / f"{run_filename(*j.key)}.json")
        if prev is not None and prev.variant_params == j.variant:
            done[j.key] = prev
        else:
            todo.append(j)
    for j, r in zip(todo, _execute_all(todo, workers)):
        done[j.key] = r
    return [done[j.key] for j in jobs], len(todo)


def run_experiment(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Execute (or resume) the whole matrix, then write summary.csv, aggregate.json and figures."""
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    plain = [v for v in cfg.variants if not v.get("derive")]
    derived_entries = [v for v in cfg.variants if v.get("derive")]
    results, executed = _run_jobs(expand_jobs(cfg, out, plain), cfg.workers)
    derived_info = {}
    if derived_entries:
        resolver, derived_info = make_resolver(cfg, results)
        more, n2 = _run_jobs(expand_jobs(cfg, out, derived_entries, resolver), cfg.workers)
        results += more
        executed += n2
        _atomic_write_text(out / "derived.json", json.dumps(derived_info, indent=1, sort_keys=True))
    report = write_report(out, results)
    return ExperimentOutcome(results, report, executed, derived_info)


def make_resolver(cfg: ExperimentConfig, results: list[RunResult]):
    aa_runs = index_results(results, cfg.aa_variant_name())
    targets = [(t.name, setting_label(n)) for t in cfg.tasks for n in cfg.data_settings]
    task_order = [t.name for t in cfg.tasks]
    source_seed = cfg.seeds[0]
    L = cfg.backbone.num_layers
    uni_key = None
    if cfg.uni_source:
        s = cfg.uni_source
        uni_key = (s["task"], s.get("setting", "full"), int(s.get("seed", source_seed)))
    cache: dict[str, dict] = {}

    def focused(mode):
        if mode not in cache:
            cache[mode] = derive_focused(mode, aa_runs, targets, source_seed, uni_key, task_order)
        return cache[mode]

    def resolve(entry: dict, task: str, setting: str) -> AdapterVariant:
        mode = entry["derive"]
        if entry["kind"] == "aa_focused":
            return focused(mode)[(task, setting)]
        if mode == "aa":
            return derive_adapterdrop_counterparts(focused("spec"), L)["aa"][(task, setting)]
        k = len(focused("uni")[(task, setting)].layers)
        return derive_adapterdrop_counterparts(focused("uni"), L, k)["uni"][(task, setting)]

    info = {}
    for entry in cfg.variants:
        if entry.get("derive"):
            info[entry["name"]] = {f"{t}/{s}": variant_to_dict(resolve(entry, t, s)) for t, s in targets}
    if any(e.get("derive") in ("uni", "sim") for e in cfg.variants):
        key = uni_key or uni_source_key(aa_runs, task_order, source_seed)
        info["uni_source"] = {"task": key[0], "setting": key[1], "seed": key[2]}
    return resolve, info


def layer_sweep(cfg: ExperimentConfig, ks: Iterable[int], activation: str = "relu") -> list[dict]:
    """Train LastK(k) for each k and tabulate mean metric against k."""
    ks = list(ks)
    L = cfg.backbone.num_layers
    bad = [k for k in ks if not 0 <= k <= L]
    if bad:
        raise ConfigError(f"sweep values {bad} outside [0, {L}]")
    entries = [{"kind": "last_k", "k": k, "activation": activation} for k in ks]
    sweep_dir = str(cfg.resolved_output_dir() / f"sweep_{activation}")
    sweep_cfg = ExperimentConfig(cfg.tasks, entries, cfg.data_settings, cfg.seeds, cfg.backbone, cfg.adapter,
                                 cfg.optimizer, sweep_dir, cfg.workers, cfg.test_fraction, None,
                                 cfg.save_checkpoints)
    outcome = run_experiment(sweep_cfg)
    rows = []
    for task in cfg.tasks:
        for n in cfg.data_settings:
            for k, e in zip(ks, sweep_cfg.variants):
                try:
                    r = outcome.report.row(task.name, e["name"], setting_label(n))
                except KeyError:
                    continue
                rows.append({"task": task.name, "setting": setting_label(n), "k": k, "activation": activation,
                             "seed_count": r.seed_count, "mean": r.mean, "std": r.std})
    out = sweep_cfg.resolved_output_dir()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["task", "setting", "k", "activation", "seed_count", "mean", "std"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _atomic_write_text(out / f"sweep_{activation}.csv", buf.getvalue())
    if rows:
        from .plotting import plot_sweep
        plot_sweep(rows, out / "figures" / f"sweep_{activation}.svg")
    return rows
