"""Per-example task allocation for Full Task, STA, ISTA and STA-Gap training.

Tasks are identified by 0-based indices ``0..T-1``. A plan for one optimizer
step is a list of :class:`SubStepAllocation`; each one becomes one parameter
update. Sub-steps with ``delay > 0`` belong to a later step (the STA-Gap
revisit of the same batch).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np

MODES = ("FT", "STA", "ISTA", "STAGap")


class AllocationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationMode:
    kind: str = "FT"
    k: int = 1
    gap: int = 2
    # STA-Gap only: revisit with the complement of the first allocation
    complement: bool = False

    def validate(self, num_tasks: int) -> None:
        if self.kind not in MODES:
            raise AllocationConfigError(f"unknown allocation mode {self.kind!r}; choose from {MODES}")
        if self.kind != "FT" and not 1 <= self.k <= num_tasks:
            raise AllocationConfigError(f"subset size k={self.k} must lie in [1, {num_tasks}]")
        if self.kind == "STAGap" and self.gap < 2:
            raise AllocationConfigError("STAGap needs gap >= 2 (gap 1 is ISTA)")

    def updates_per_step(self, num_tasks: int) -> int:
        """Parameter updates per fresh batch."""
        if self.kind == "ISTA":
            return math.ceil(num_tasks / self.k)
        if self.kind == "STAGap":
            return 2
        return 1


@dataclass(frozen=True)
class SubStepAllocation:
    subsets: Tuple[FrozenSet[int], ...]
    num_tasks: int
    delay: int = 0

    @property
    def batch_size(self) -> int:
        return len(self.subsets)

    def groups(self) -> List[np.ndarray]:
        return group_by_task(self)

    def counts(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups()], dtype=np.int64)


def _pick(candidates: Sequence[int], k: int, u: Sequence[float]) -> FrozenSet[int]:
    """Partial Fisher-Yates: first ``k`` slots of a shuffle, one uniform per slot."""
    pool = list(candidates)
    n = len(pool)
    for j in range(k):
        r = j + min(int(u[j] * (n - j)), n - j - 1)
        pool[j], pool[r] = pool[r], pool[j]
    return frozenset(pool[:k])


def sample_subset(candidates: Iterable[int], k: int, rng: np.random.Generator) -> FrozenSet[int]:
    """Uniform random subset of size ``min(k, |candidates|)``.

    Consumes exactly that many ``rng.random()`` draws.
    """
    cands = sorted(candidates)
    if not cands:
        raise ValueError("sample_subset: no candidate tasks left")
    if k < 1:
        raise ValueError("sample_subset: k must be >= 1")
    eff = min(k, len(cands))
    return _pick(cands, eff, rng.random(eff))


def plan_step(mode: AllocationMode, m: int, num_tasks: int, rng: np.random.Generator) -> List[SubStepAllocation]:
    """Allocation plan for one batch of ``m`` examples.

    Draws a fixed ``(m, T)`` block of uniforms (twice for STA-Gap); row ``i``
    is example ``i``'s substream, so per-example results do not depend on the
    order examples are visited.
    """
    if m < 1:
        raise AllocationConfigError("batch size must be >= 1")
    if num_tasks < 2:
        raise AllocationConfigError("allocation needs at least 2 tasks")
    mode.validate(num_tasks)
    everything = tuple(range(num_tasks))
    full = frozenset(everything)
    u = rng.random((m, num_tasks))

    if mode.kind == "FT":
        return [SubStepAllocation((full,) * m, num_tasks)]

    k = mode.k
    if mode.kind == "STA":
        return [SubStepAllocation(tuple(_pick(everything, k, u[i]) for i in range(m)), num_tasks)]

    if mode.kind == "ISTA":
        remaining = [list(everything) for _ in range(m)]
        used = 0
        plans = []
        while remaining[0]:
            subsets = []
            for i in range(m):
                eff = min(k, len(remaining[i]))
                st = _pick(remaining[i], eff, u[i, used:used + eff])
                remaining[i] = [t for t in remaining[i] if t not in st]
                subsets.append(st)
            used += min(k, num_tasks - used)
            plans.append(SubStepAllocation(tuple(subsets), num_tasks))
        return plans

    # STAGap
    first = tuple(_pick(everything, k, u[i]) for i in range(m))
    if mode.complement:
        second = tuple((full - s) or full for s in first)
    else:
        u2 = rng.random((m, num_tasks))
        second = tuple(_pick(everything, k, u2[i]) for i in range(m))
    return [SubStepAllocation(first, num_tasks), SubStepAllocation(second, num_tasks, delay=mode.gap)]


def group_by_task(allocation: SubStepAllocation) -> List[np.ndarray]:
    """Example indices allocated to each task; groups may be empty."""
    groups: List[List[int]] = [[] for _ in range(allocation.num_tasks)]
    for i, subset in enumerate(allocation.subsets):
        for t in subset:
            groups[t].append(i)
    return [np.array(g, dtype=np.int64) for g in groups]


def write_trace(path, rows: Iterable[Tuple[int, int, np.ndarray, SubStepAllocation]]) -> None:
    """CSV audit trail: one line per (step, sub_step, example, task).

    ``rows`` yields ``(step, sub_step, example_indices, allocation)`` where
    ``example_indices`` maps batch positions to dataset indices.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sub_step", "example_index", "task_id"])
        for step, sub, idx, alloc in rows:
            for pos, subset in enumerate(alloc.subsets):
                for t in sorted(subset):
                    w.writerow([step, sub, int(idx[pos]), t])


def read_trace(path) -> List[Tuple[int, int, int, int]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(int(x["step"]), int(x["sub_step"]), int(x["example_index"]), int(x["task_id"])) for x in r]
