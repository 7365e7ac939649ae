"""Experiment orchestration: seeds, baselines, comparisons, profiles and files.

Each (config, seed) run is independent. With ``jobs > 1`` runs go to a
process pool; results are always joined in (config, seed) order so outputs
do not depend on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import mtl_gain as dm
from .config import ConfigError, ExperimentConfig
from .model import MultiTaskModel
from .synthbench import Dataset, generate, import_csv
from .telemetry import (AngleHistogram, profile_step_angles, profile_task_angles, write_angles_csv,
                        write_histogram_json)
from .allocation import AllocationMode
from .training import build_model, fresh_batches, loss_specs_for, restrict_tasks, train_seed

FORMAT_VERSION = 1
TRAJECTORY_POINTS = 200


class DivergedRunError(ArithmeticError):
    """Raised by callers that want a hard failure when any seed diverged."""


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.benchmark.dataset_path:
        return import_csv(cfg.benchmark.dataset_path)
    return generate(cfg.benchmark.spec(), cfg.benchmark.seed)


def _benchmark_key(cfg: ExperimentConfig) -> dict:
    if cfg.benchmark.dataset_path:
        return {"dataset_path": str(Path(cfg.benchmark.dataset_path).resolve())}
    return {"spec": cfg.benchmark.spec().to_dict(), "seed": cfg.benchmark.seed}


def _load_checkpoint(path) -> MultiTaskModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return MultiTaskModel.load(path)


def _budget(cfg: ExperimentConfig, num_tasks: int, n_train: int, *, single: bool = False) -> int:
    mode = cfg.allocation.mode_obj()
    if single:
        return fresh_batches(AllocationMode("FT"), 1, n_train, cfg.optimizer.batch_size,
                             cfg.optimizer.steps, cfg.optimizer.epochs)
    return fresh_batches(mode, num_tasks, n_train, cfg.optimizer.batch_size,
                         cfg.optimizer.steps, cfg.optimizer.epochs, cfg.equal_steps)


def _run_seed(cfg_dict: dict, seed: int, tasks: Optional[List[int]], log_rows: bool) -> dict:
    """One isolated training run; returns plain data so it can cross processes."""
    cfg = cfgmod.from_dict(cfg_dict)
    ds = load_dataset(cfg)
    single = tasks is not None and len(tasks) < ds.num_tasks
    steps = _budget(cfg, ds.num_tasks, len(ds.train), single=single)
    if single:
        kinds = [cfg.model.losses[t] for t in tasks] if cfg.model.losses else None
        specs = loss_specs_for(restrict_tasks(ds, tasks), kinds)
        model = None
        mode, strategy, combiner = cfg.allocation.mode_obj(), "uniform", "sum"
    else:
        specs = loss_specs_for(ds, cfg.model.losses, cfg.model.task_weights)
        model = _load_checkpoint(cfg.model.checkpoint) if cfg.model.checkpoint else None
        mode, strategy, combiner = cfg.allocation.mode_obj(), cfg.weighting.strategy, cfg.combiner.kind
    log = train_seed(
        ds, seed=seed, mode=mode, steps=steps, lr=cfg.optimizer.lr, batch_size=cfg.optimizer.batch_size,
        hidden=cfg.model.hidden, activation=cfg.model.activation, specs=specs, strategy=strategy,
        temperature=cfg.weighting.temperature, alpha=cfg.weighting.alpha, weight_lr=cfg.weighting.lr,
        combiner=combiner, beta=cfg.combiner.beta, normalization=cfg.optimizer.loss_normalization,
        eval_every=0 if single else cfg.eval_every, tasks=tasks, model=model, log_rows=log_rows,
    )
    return {
        "seed": seed, "status": log.status, "error": log.error, "updates": log.updates,
        "steps": steps, "metrics": {int(k): float(v) for k, v in log.metrics.items()},
        "lambdas": [float(v) for v in log.lambdas], "cosines": [float(c) for c in log.cosines],
        "rows": log.rows, "seconds": log.seconds,
    }


def _map_runs(jobs: int, calls: Sequence[tuple]) -> List[dict]:
    if jobs <= 1 or len(calls) <= 1:
        return [_run_seed(*c) for c in calls]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_seed, *c) for c in calls]
        return [f.result() for f in futures]


# -- baselines ---------------------------------------------------------------

@dataclass
class Baselines:
    metrics: Dict[int, float]
    per_seed: Dict[int, Dict[int, float]]
    metric_kinds: Dict[int, str]
    directions: Dict[int, str]
    seeds: List[int]
    status: Dict[int, str] = field(default_factory=dict)

    def vector(self) -> List[float]:
        return [self.metrics[t] for t in sorted(self.metrics)]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION, "seeds": self.seeds,
            "metrics": {str(t): v for t, v in sorted(self.metrics.items())},
            "per_seed": {str(s): {str(t): v for t, v in sorted(m.items())} for s, m in sorted(self.per_seed.items())},
            "metric_kinds": {str(t): v for t, v in sorted(self.metric_kinds.items())},
            "directions": {str(t): v for t, v in sorted(self.directions.items())},
            "status": {str(s): v for s, v in sorted(self.status.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Baselines":
        return cls(
            {int(t): float(v) for t, v in d["metrics"].items()},
            {int(s): {int(t): float(v) for t, v in m.items()} for s, m in d["per_seed"].items()},
            {int(t): v for t, v in d["metric_kinds"].items()},
            {int(t): v for t, v in d["directions"].items()},
            list(d["seeds"]),
            {int(s): v for s, v in d.get("status", {}).items()},
        )


def single_task_baselines(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> Baselines:
    """T independent encoder-plus-one-decoder models per seed, seed-averaged.

    Architecture, optimizer and budget follow ``cfg``; allocation, weighting,
    combiner and the equal-steps stretch do not apply to one task.
    """
    ds = load_dataset(cfg)
    seeds = list(cfg.seeds if seeds is None else seeds)
    base = cfg.to_dict()
    base["equal_steps"] = False
    calls = [(base, s, [t], False) for s in seeds for t in range(ds.num_tasks)]
    results = _map_runs(cfg.jobs, calls)
    per_seed: Dict[int, Dict[int, float]] = {s: {} for s in seeds}
    status: Dict[int, str] = {s: "ok" for s in seeds}
    for (_, s, (t,), _), r in zip(calls, results):
        if r["status"] != "ok":
            status[s] = r["status"]
            continue
        per_seed[s][t] = r["metrics"][t]
    metrics = {}
    for t in range(ds.num_tasks):
        vals = [per_seed[s][t] for s in seeds if t in per_seed[s]]
        metrics[t] = float(np.mean(vals)) if vals else float("nan")
    return Baselines(metrics, per_seed, {m.task: m.kind for m in ds.metrics},
                     {m.task: m.direction for m in ds.metrics}, seeds, status)


def write_baselines(out: Path, b: Baselines) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "baselines.json", b.to_dict())
    with open(out / "baselines.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        tasks = sorted(b.metrics)
        w.writerow(["seed"] + [f"metric_{t}" for t in tasks])
        for s in b.seeds:
            w.writerow([s] + [_fmt(b.per_seed[s].get(t)) for t in tasks])
        w.writerow(["mean"] + [_fmt(b.metrics[t]) for t in tasks])


def read_baselines(path) -> Baselines:
    with open(path) as fh:
        return Baselines.from_dict(json.load(fh))


# -- training report -----------------------------------------------------------

@dataclass
class MetricsReport:
    name: str
    config: dict
    seeds: List[int]
    runs: List[dict]
    baselines: Baselines
    seconds: float = 0.0

    @property
    def tasks(self) -> List[int]:
        return sorted(self.baselines.metrics)

    @property
    def directions(self) -> List[str]:
        return [self.baselines.directions[t] for t in self.tasks]

    @property
    def ok_runs(self) -> List[dict]:
        return [r for r in self.runs if r["status"] == "ok"]

    @property
    def diverged(self) -> bool:
        return any(r["status"] != "ok" for r in self.runs)

    def mean_metrics(self) -> Dict[int, float]:
        ok = self.ok_runs
        return {t: float(np.mean([r["metrics"][t] for r in ok])) if ok else float("nan") for t in self.tasks}

    def delta(self) -> float:
        m = self.mean_metrics()
        return dm.delta_mtl([m[t] for t in self.tasks], self.baselines.vector(), self.directions)

    def delta_relative(self) -> float:
        m = self.mean_metrics()
        return dm.delta_mtl_relative([m[t] for t in self.tasks], self.baselines.vector(), self.directions)

    def per_seed_delta(self) -> Dict[int, float]:
        return {r["seed"]: dm.delta_mtl([r["metrics"][t] for t in self.tasks], self.baselines.vector(),
                                        self.directions) for r in self.ok_runs}

    def to_dict(self) -> dict:
        angle = {}
        for r in self.runs:
            if r["cosines"]:
                deg = np.degrees(np.arccos(np.clip(r["cosines"], -1.0, 1.0)))
                angle[str(r["seed"])] = {"mean_deg": float(deg.mean()), "std_deg": float(deg.std()),
                                         "count": int(deg.size)}
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "seeds": self.seeds,
            "status": {str(r["seed"]): r["status"] for r in self.runs},
            "errors": {str(r["seed"]): r["error"] for r in self.runs if r["error"]},
            "updates": {str(r["seed"]): r["updates"] for r in self.runs},
            "fresh_batches": {str(r["seed"]): r["steps"] for r in self.runs},
            "metrics": {str(r["seed"]): {str(t): v for t, v in sorted(r["metrics"].items())} for r in self.runs},
            "mean_metrics": {str(t): v for t, v in self.mean_metrics().items()},
            "metric_kinds": {str(t): self.baselines.metric_kinds[t] for t in self.tasks},
            "directions": {str(t): d for t, d in zip(self.tasks, self.directions)},
            "baselines": {str(t): v for t, v in sorted(self.baselines.metrics.items())},
            "delta_mtl": self.delta() if self.ok_runs else None,
            "delta_mtl_relative_percent": self.delta_relative() if self.ok_runs else None,
            "delta_mtl_per_seed": {str(s): v for s, v in self.per_seed_delta().items()},
            "final_lambdas": {str(r["seed"]): r["lambdas"] for r in self.runs},
            "lambda_trajectories": {str(r["seed"]): _lambda_trajectory(r["rows"], self.tasks) for r in self.runs},
            "training_task_angles": angle,
            "wall_clock_seconds": {"total": self.seconds,
                                   "per_seed": {str(r["seed"]): r["seconds"] for r in self.runs}},
            "config": self.config,
        }


def _lambda_trajectory(rows: List[dict], tasks: List[int]) -> dict:
    train_rows = [r for r in rows if "loss_total" in r]
    if not train_rows:
        return {}
    stride = max(1, math.ceil(len(train_rows) / TRAJECTORY_POINTS))
    picked = train_rows[::stride]
    out = {"step": [r["step"] for r in picked]}
    for t in tasks:
        out[f"lambda_{t}"] = [r.get(f"lambda_{t}") for r in picked]
    return out


def train(cfg: ExperimentConfig, baselines: Optional[Baselines] = None) -> MetricsReport:
    start = time.perf_counter()
    if baselines is None:
        baselines = single_task_baselines(cfg)
    d = cfg.to_dict()
    runs = _map_runs(cfg.jobs, [(d, s, None, True) for s in cfg.seeds])
    return MetricsReport(cfg.name, d, list(cfg.seeds), runs, baselines, time.perf_counter() - start)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def metrics_columns(tasks: Sequence[int]) -> List[str]:
    return (["step", "loss_total"] + [f"loss_{t}" for t in tasks] + [f"lambda_{t}" for t in tasks]
            + [f"metric_{t}" for t in tasks])


def write_metrics_csv(path, rows: List[dict], tasks: Sequence[int]) -> None:
    cols = metrics_columns(tasks)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False, allow_nan=True)
        fh.write("\n")


def write_report(out, report: MetricsReport, figures: bool = True) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for r in report.runs:
        write_metrics_csv(out / f"metrics_seed{r['seed']}.csv", r["rows"], report.tasks)
    _write_json(out / "report.json", report.to_dict())
    write_baselines(out, report.baselines)
    if figures:
        from .plotting import plot_loss_curves
        plot_loss_curves({r["seed"]: r["rows"] for r in report.runs}, report.tasks, out / "loss_curves",
                         title=report.name)


# -- comparison ------------------------------------------------------------------

BASELINE_ROW = "single-task"


@dataclass
class ComparisonRow:
    name: str
    metrics: Dict[int, float]
    delta_mtl: float
    delta_mtl_relative: float
    status: str
    updates: Optional[float]


def comparison_rows(reports: Sequence[MetricsReport], baselines: Baselines) -> List[ComparisonRow]:
    tasks = sorted(baselines.metrics)
    dirs = [baselines.directions[t] for t in tasks]
    rows = [ComparisonRow(BASELINE_ROW, dict(baselines.metrics), 0.0, 0.0, "ok", None)]
    for rep in reports:
        m = rep.mean_metrics()
        vec = [m[t] for t in tasks]
        ok = bool(rep.ok_runs)
        rows.append(ComparisonRow(
            rep.name, m,
            dm.delta_mtl(vec, baselines.vector(), dirs) if ok else float("nan"),
            dm.delta_mtl_relative(vec, baselines.vector(), dirs) if ok else float("nan"),
            "diverged" if rep.diverged else "ok",
            float(np.mean([r["updates"] for r in rep.runs])),
        ))
    # highest gain first; NaN (all seeds diverged) last; ties by name
    return sorted(rows, key=lambda r: (math.isnan(r.delta_mtl), -r.delta_mtl if not math.isnan(r.delta_mtl) else 0.0,
                                       r.name))


def check_same_benchmark(cfgs: Sequence[ExperimentConfig]) -> None:
    keys = [_benchmark_key(c) for c in cfgs]
    for c, k in zip(cfgs[1:], keys[1:]):
        if k != keys[0]:
            raise ConfigError(f"config {c.name!r} uses a different benchmark than {cfgs[0].name!r}")


def _unique_names(cfgs: Sequence[ExperimentConfig]) -> List[str]:
    seen: Dict[str, int] = {}
    out = []
    for c in cfgs:
        n = seen.get(c.name, 0) + 1
        seen[c.name] = n
        out.append(c.name if n == 1 else f"{c.name}-{n}")
    return out


def compare(cfgs: Sequence[ExperimentConfig], out=None, baselines: Optional[Baselines] = None,
            figures: bool = True):
    """Train every config against one shared set of single-task baselines.

    Baselines come from the first config. Returns ``(rows, reports)``.
    """
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    check_same_benchmark(cfgs)
    if baselines is None:
        baselines = single_task_baselines(cfgs[0])
    reports = [train(c, baselines) for c in cfgs]
    rows = comparison_rows(reports, baselines)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_baselines(out, baselines)
        for name, rep in zip(_unique_names(cfgs), reports):
            write_report(out / name, rep, figures=figures)
        write_comparison(out, rows, sorted(baselines.metrics), baselines)
        if figures:
            from .plotting import plot_delta_bars
            plot_delta_bars([(r.name, r.delta_mtl) for r in rows], out / "comparison")
    return rows, reports


def write_comparison(out: Path, rows: Sequence[ComparisonRow], tasks: Sequence[int], baselines: Baselines) -> None:
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"metric_{t}" for t in tasks] + ["delta_mtl", "delta_mtl_relative_percent",
                                                                  "status", "mean_updates"])
        for r in rows:
            w.writerow([r.name] + [_fmt(r.metrics.get(t)) for t in tasks]
                       + [_fmt(r.delta_mtl), _fmt(r.delta_mtl_relative), r.status, _fmt(r.updates)])
    _write_json(out / "comparison.json", {
        "format_version": FORMAT_VERSION,
        "metric_kinds": {str(t): baselines.metric_kinds[t] for t in tasks},
        "directions": {str(t): baselines.directions[t] for t in tasks},
        "rows": [{"method": r.name, "metrics": {str(t): r.metrics.get(t) for t in tasks},
                  "delta_mtl": r.delta_mtl, "delta_mtl_relative_percent": r.delta_mtl_relative,
                  "status": r.status, "mean_updates": r.updates} for r in rows],
    })


# -- profiling -------------------------------------------------------------------

PROFILE_MODES = {"task-angles": ("FT", "STA"), "step-angles": ("FT", "ISTA")}


@dataclass
class ProfileResult:
    which: str
    histograms: Dict[str, AngleHistogram]
    per_seed: Dict[str, Dict[int, AngleHistogram]]


def profile(cfg: ExperimentConfig, which: str, out=None, figures: bool = True) -> ProfileResult:
    """Frozen-model angle profiles for every seed of ``cfg``.

    Without ``profile.mode`` both modes of the comparison are profiled (FT and
    STA for task angles, FT and ISTA for step angles) on the same model.
    """
    if which not in PROFILE_MODES:
        raise ConfigError(f"--which must be one of {sorted(PROFILE_MODES)}")
    modes = PROFILE_MODES[which]
    if cfg.profile.mode is not None:
        if cfg.profile.mode not in modes:
            raise ConfigError(f"profile.mode {cfg.profile.mode} does not apply to {which}")
        modes = (cfg.profile.mode,)
    ds = load_dataset(cfg)
    ckpt = _load_checkpoint(cfg.model.checkpoint) if cfg.model.checkpoint else None
    k = cfg.allocation.k
    fn = profile_task_angles if which == "task-angles" else profile_step_angles
    kind = which.replace("-angles", "")
    pooled: Dict[str, List[float]] = {m: [] for m in modes}
    skipped = {m: 0 for m in modes}
    per_seed: Dict[str, Dict[int, AngleHistogram]] = {m: {} for m in modes}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
    for s in cfg.seeds:
        model = ckpt.copy() if ckpt is not None else build_model(ds, cfg.model.hidden, cfg.model.activation, s)
        before = model.params.checksum()
        for m in modes:
            prof = fn(model, ds, m, epochs=cfg.profile.epochs, batch_size=cfg.optimizer.batch_size, seed=s, k=k)
            per_seed[m][s] = prof.histogram()
            pooled[m].extend(prof.angles)
            skipped[m] += prof.skipped
            if out is not None:
                write_angles_csv(out / f"{kind}_angles_{m}_seed{s}.csv", prof)
        if model.params.checksum() != before:
            raise RuntimeError("profiling modified model parameters")
    hists = {m: AngleHistogram.from_samples(pooled[m], skipped=skipped[m]) for m in modes}
    if out is not None:
        for m, h in hists.items():
            write_histogram_json(out / f"{kind}_hist_{m}.json", h, mode=m, kind=kind, seeds=list(cfg.seeds))
        summary = {"format_version": FORMAT_VERSION, "which": which, "seeds": list(cfg.seeds), "modes": {}}
        for m in modes:
            summary["modes"][m] = {
                "pooled": {"mean": hists[m].mean, "std": hists[m].std, "count": hists[m].count,
                           "mass_80_100": hists[m].mass_between(80, 100)},
                "per_seed": {str(s): {"mean": h.mean, "count": h.count, "mass_80_100": h.mass_between(80, 100)}
                             for s, h in per_seed[m].items()},
            }
        _write_json(out / f"{kind}_summary.json", summary)
        if figures:
            from .plotting import plot_histograms
            plot_histograms(hists, out / f"{kind}_angles", title=f"{which} ({cfg.name})")
    return ProfileResult(which, hists, per_seed)
