"""Gradient-angle profiling on a frozen model.

Two measurements, both on shared-encoder gradients only:

* task angles: per batch, the angle between the tasks' gradients. Under STA
  each task's gradient comes only from the examples allocated to it.
* step angles: the angle between the combined gradients of consecutive
  (sub-)steps. ISTA's consecutive sub-steps reuse one batch with the remaining
  tasks; FT's consecutive steps see fresh batches.

No parameter is ever updated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .allocation import AllocationMode, plan_step
from .model import MultiTaskModel
from .rng import STREAM_ALLOC, stream
from .synthbench import Dataset
from .training import BatchSampler, compute_step, loss_specs_for

BIN_WIDTH = 5.0


class UndefinedAngleError(ValueError):
    pass


def angle_between(a, b) -> float:
    """Angle in degrees, from the clamped cosine."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedAngleError("angle with a zero vector is undefined")
    cos = float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
    return math.degrees(math.acos(cos))


@dataclass
class AngleHistogram:
    edges: np.ndarray
    counts: np.ndarray
    count: int
    mean: float
    std: float
    skipped: int = 0

    @classmethod
    def from_samples(cls, samples: Sequence[float], bin_width: float = BIN_WIDTH, skipped: int = 0):
        edges = np.arange(0.0, 180.0 + bin_width / 2, bin_width)
        s = np.asarray(samples, dtype=np.float64)
        counts, _ = np.histogram(s, bins=edges)
        mean = float(s.mean()) if s.size else float("nan")
        std = float(s.std()) if s.size else float("nan")
        return cls(edges, counts.astype(np.int64), int(s.size), mean, std, skipped)

    def mass_between(self, lo: float, hi: float) -> float:
        """Fraction of samples in bins lying inside [lo, hi)."""
        if self.count == 0:
            return 0.0
        inside = (self.edges[:-1] >= lo - 1e-9) & (self.edges[1:] <= hi + 1e-9)
        return float(self.counts[inside].sum() / self.count)

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(), "count": self.count,
                "mean": self.mean, "std": self.std, "skipped": self.skipped}


@dataclass
class AngleProfile:
    kind: str  # task_pair | step_pair
    mode: str
    samples: List[Tuple[int, float]] = field(default_factory=list)
    skipped: int = 0

    @property
    def angles(self) -> List[float]:
        return [a for _, a in self.samples]

    def histogram(self) -> AngleHistogram:
        return AngleHistogram.from_samples(self.angles, skipped=self.skipped)


def _batches(ds: Dataset, batch_size: int, epochs: int, seed: int):
    sampler = BatchSampler(len(ds.train), batch_size, seed)
    for step in range(sampler.per_epoch * epochs):
        idx, _ = sampler.next()
        yield step, idx


def profile_task_angles(model: MultiTaskModel, ds: Dataset, mode: str = "FT", *, epochs: int = 2,
                        batch_size: int = 32, seed: int = 0, k: int = 1) -> AngleProfile:
    if mode not in ("FT", "STA"):
        raise ValueError("task-angle profiling supports FT and STA")
    specs = loss_specs_for(ds)
    T = ds.num_tasks
    lam = np.ones(T)
    alloc_mode = AllocationMode(mode, k)
    prof = AngleProfile("task_pair", mode)
    for step, idx in _batches(ds, batch_size, epochs, seed):
        alloc = plan_step(alloc_mode, len(idx), T, stream(seed, STREAM_ALLOC, step))[0]
        if np.any(alloc.counts() == 0):
            prof.skipped += 1
            continue
        res = compute_step(model, ds.train, idx, alloc, specs, lam, want_bundle=True)
        g = res.bundle.grads
        for a in range(T):
            for b in range(a + 1, T):
                try:
                    prof.samples.append((step, angle_between(g[a], g[b])))
                except UndefinedAngleError:
                    prof.skipped += 1
    return prof


def step_angles_from_gradients(grads: Iterable[np.ndarray]) -> List[Tuple[int, float]]:
    """Angles between each gradient and its predecessor, tagged with the later index."""
    out = []
    prev = None
    for i, g in enumerate(grads):
        if prev is not None:
            out.append((i, angle_between(prev, g)))
        prev = g
    return out


def combined_step_gradients(model: MultiTaskModel, ds: Dataset, mode: str = "FT", *, epochs: int = 2,
                            batch_size: int = 32, seed: int = 0, k: int = 1) -> List[np.ndarray]:
    if mode not in ("FT", "ISTA"):
        raise ValueError("step-angle profiling supports FT and ISTA")
    specs = loss_specs_for(ds)
    T = ds.num_tasks
    lam = np.ones(T)
    alloc_mode = AllocationMode(mode, k)
    grads = []
    for step, idx in _batches(ds, batch_size, epochs, seed):
        for alloc in plan_step(alloc_mode, len(idx), T, stream(seed, STREAM_ALLOC, step)):
            grads.append(compute_step(model, ds.train, idx, alloc, specs, lam).shared_grad)
    return grads


def profile_step_angles(model: MultiTaskModel, ds: Dataset, mode: str = "FT", *, epochs: int = 2,
                        batch_size: int = 32, seed: int = 0, k: int = 1) -> AngleProfile:
    grads = combined_step_gradients(model, ds, mode, epochs=epochs, batch_size=batch_size, seed=seed, k=k)
    prof = AngleProfile("step_pair", mode)
    prof.samples = step_angles_from_gradients(grads)
    return prof


def write_angles_csv(path, profile: AngleProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "step", "angle_deg"])
        for step, a in profile.samples:
            w.writerow([profile.kind, step, repr(float(a))])


def write_histogram_json(path, hist: AngleHistogram, **extra) -> None:
    doc = dict(hist.to_dict(), **extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
