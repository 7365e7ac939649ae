"""Seeded synthetic multi-task benchmarks over a shared tanh teacher.

The teacher maps ``x ~ N(0, I_d)`` to a pool of tanh features. A fraction
``relatedness`` of every task's ``h`` input features is common to all tasks;
the rest are private to the task. Regression targets are a random linear read
of the task's features plus Gaussian noise; classification labels are the
argmax of random linear logits.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .rng import stream

STREAM_TEACHER = 11
STREAM_INPUTS = 12
STREAM_NOISE = 13
MIN_CLASS_FRACTION = 0.10
MAX_HEAD_REDRAWS = 100


@dataclass(frozen=True)
class TaskDef:
    kind: str = "regression"
    noise: float = 0.1
    classes: int = 4

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and self.classes < 2:
            raise ValueError("classification tasks need at least 2 classes")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    input_dim: int = 16
    teacher_width: int = 32
    relatedness: float = 0.9
    tasks: Tuple[TaskDef, ...] = (TaskDef("regression", 0.1), TaskDef("classification", 0.0, 4))
    n_train: int = 2000
    n_eval: int = 1000
    # task kind repeated for every task (duplicated-task sanity benchmarks)
    duplicate_tasks: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(t if isinstance(t, TaskDef) else TaskDef(**t) for t in self.tasks))
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError("relatedness must lie in [0, 1]")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("dataset sizes must be >= 1")
        if self.input_dim < 1 or self.teacher_width < 1:
            raise ValueError("dimensions must be positive")
        if len(self.tasks) < 1:
            raise ValueError("need at least one task")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d


@dataclass(frozen=True)
class MetricSpec:
    task: int
    kind: str
    direction: str

    def __post_init__(self):
        want = {"rmse": "lower", "l1": "lower", "accuracy": "higher"}
        if self.kind not in want:
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.direction != want[self.kind]:
            raise ValueError(f"metric {self.kind} is {want[self.kind]}-better, not {self.direction}-better")

    @property
    def sign(self) -> int:
        return 1 if self.direction == "higher" else -1


@dataclass
class Split:
    x: np.ndarray
    targets: List[np.ndarray]

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Split":
        return Split(self.x[idx], [y[idx] for y in self.targets])


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    seed: int
    train: Split
    eval: Split
    metrics: List[MetricSpec] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return self.spec.num_tasks

    def task_kinds(self) -> List[str]:
        return [t.kind for t in self.spec.tasks]

    def output_dims(self) -> List[int]:
        return [t.classes if t.kind == "classification" else 1 for t in self.spec.tasks]


def default_metrics(spec: SyntheticTaskSpec) -> List[MetricSpec]:
    return [MetricSpec(t, "accuracy", "higher") if d.kind == "classification" else MetricSpec(t, "rmse", "lower")
            for t, d in enumerate(spec.tasks)]


def _feature_layout(h: int, rho: float, num_tasks: int) -> List[np.ndarray]:
    """Column indices of the teacher pool read by each task."""
    n_shared = int(round(rho * h))
    n_private = h - n_shared
    shared = np.arange(n_shared)
    cols = []
    for t in range(num_tasks):
        start = n_shared + t * n_private
        cols.append(np.concatenate([shared, np.arange(start, start + n_private)]))
    return cols


def generate(spec: SyntheticTaskSpec, seed: int = 0) -> Dataset:
    """Deterministic train/eval splits for ``spec`` and ``seed``."""
    h, T = spec.teacher_width, spec.num_tasks
    cols = _feature_layout(h, spec.relatedness, T)
    pool = max(int(c.max()) + 1 for c in cols) if h else 0
    teacher_rng = stream(seed, STREAM_TEACHER)
    w_teacher = teacher_rng.normal(0.0, 1.0 / np.sqrt(spec.input_dim), (spec.input_dim, pool))
    n = spec.n_train + spec.n_eval
    x = stream(seed, STREAM_INPUTS).normal(size=(n, spec.input_dim))
    feats = np.tanh(x @ w_teacher)

    targets = []
    for t, task in enumerate(spec.tasks):
        src = 0 if spec.duplicate_tasks else t
        head_rng = stream(seed, STREAM_TEACHER, 100 + src)
        noise_rng = stream(seed, STREAM_NOISE, src)
        phi = feats[:, cols[src]]
        if task.kind == "regression":
            v = head_rng.normal(0.0, 1.0 / np.sqrt(h), (h, 1))
            y = phi @ v
            y = y / y.std()
            if task.noise > 0:
                y = y + noise_rng.normal(0.0, task.noise, y.shape)
            targets.append(y)
        else:
            for _ in range(MAX_HEAD_REDRAWS):
                v = head_rng.normal(0.0, 1.0 / np.sqrt(h), (h, task.classes))
                labels = np.argmax(phi @ v, axis=1)
                freq = np.bincount(labels, minlength=task.classes) / n
                if freq.min() >= MIN_CLASS_FRACTION:
                    break
            targets.append(labels.astype(np.int64))

    tr = slice(0, spec.n_train)
    ev = slice(spec.n_train, n)
    return Dataset(
        spec, seed,
        Split(x[tr], [y[tr] for y in targets]),
        Split(x[ev], [y[ev] for y in targets]),
        default_metrics(spec),
    )


def evaluate(pred: np.ndarray, target: np.ndarray, metric: MetricSpec) -> float:
    """rmse, mean absolute error, or accuracy in percent."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    if metric.kind == "accuracy":
        labels = np.argmax(pred, axis=1) if pred.ndim == 2 else pred
        if labels.shape != target.shape:
            raise ValueError(f"accuracy: {labels.shape} predictions vs {target.shape} labels")
        return float(np.mean(labels == target) * 100.0)
    pred = pred.reshape(target.shape[0], -1).astype(np.float64)
    target = target.reshape(target.shape[0], -1).astype(np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"{metric.kind}: {pred.shape} predictions vs {target.shape} targets")
    if metric.kind == "rmse":
        return float(np.sqrt(np.mean((pred - target) ** 2)))
    return float(np.mean(np.abs(pred - target)))


# -- export / import -------------------------------------------------------

def _columns(ds: Dataset) -> List[str]:
    cols = [f"x_{j}" for j in range(ds.spec.input_dim)]
    for t, task in enumerate(ds.spec.tasks):
        cols += [f"y{t}_class"] if task.kind == "classification" else [f"y{t}_0"]
    return cols


def export_csv(ds: Dataset, path) -> None:
    """Writes ``<path>`` (train rows then eval rows) and ``<path>.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + _columns(ds))
        for name, split in (("train", ds.train), ("eval", ds.eval)):
            for i in range(len(split)):
                row = [name] + [repr(float(v)) for v in split.x[i]]
                for y in split.targets:
                    row.append(str(int(y[i])) if y.dtype.kind in "iu" else repr(float(y[i, 0])))
                w.writerow(row)
    sidecar = {"format": "stalab-dataset", "version": 1, "seed": ds.seed, "spec": ds.spec.to_dict()}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def import_csv(path) -> Dataset:
    path = Path(path)
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    spec_d = dict(side["spec"])
    spec_d["tasks"] = tuple(TaskDef(**t) for t in spec_d["tasks"])
    spec = SyntheticTaskSpec(**spec_d)
    rows = {"train": [], "eval": []}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)  # header
        for row in r:
            rows[row[0]].append(row[1:])
    d = spec.input_dim

    def build(rs):
        x = np.array([[float(v) for v in r[:d]] for r in rs]).reshape(len(rs), d)
        ys = []
        for t, task in enumerate(spec.tasks):
            col = [r[d + t] for r in rs]
            if task.kind == "classification":
                ys.append(np.array([int(v) for v in col], dtype=np.int64))
            else:
                ys.append(np.array([float(v) for v in col]).reshape(-1, 1))
        return Split(x, ys)

    return Dataset(spec, int(side["seed"]), build(rows["train"]), build(rows["eval"]), default_metrics(spec))
