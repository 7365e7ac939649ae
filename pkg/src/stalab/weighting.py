"""Task-weighting strategies: uniform, uncertainty weights, GradNorm, DWA.

All of them only rescale per-task losses by positive factors, so per-task
gradient directions are untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "uw", "gradnorm", "dwa")


def uw_total_loss(losses: Sequence[Tensor], log_vars: Sequence[Tensor]) -> Tensor:
    """sum_t exp(-s_t) * l_t + s_t / 2."""
    total = None
    for l, s in zip(losses, log_vars):
        term = ad.add(ad.multiply(ad.exp(ad.scale(s, -1.0)), l), ad.scale(s, 0.5))
        total = term if total is None else ad.add(total, term)
    return total


def dwa_weights(history: Sequence[Sequence[float]], temperature: float = 2.0,
                num_tasks: Optional[int] = None) -> np.ndarray:
    """Dynamic Weight Average from the last two epoch-mean losses.

    ``history`` lists per-task epoch losses oldest first; with fewer than two
    entries the weights are uniform.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(history) < 2:
        if num_tasks is None:
            num_tasks = len(history[0]) if history else 0
        return np.ones(num_tasks)
    prev2 = np.asarray(history[-2], dtype=np.float64)
    prev1 = np.asarray(history[-1], dtype=np.float64)
    ratio = np.ones_like(prev1)
    ok = prev2 > 0
    if not ok.all():
        log.warning("DWA: zero loss in history for tasks %s; ratio clamped to 1", np.flatnonzero(~ok).tolist())
    ratio[ok] = prev1[ok] / prev2[ok]
    z = ratio / temperature
    e = np.exp(z - z.max())
    return len(ratio) * e / e.sum()


def gradnorm_aux(norms, lam, rates, alpha) -> Tuple[float, np.ndarray]:
    """GradNorm auxiliary loss and its gradient in lambda (target held fixed)."""
    norms = np.asarray(norms, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    weighted = lam * norms
    target = weighted.mean() * np.asarray(rates, dtype=np.float64) ** alpha
    diff = weighted - target
    return float(np.abs(diff).sum()), np.sign(diff) * norms


def gradnorm_step(norms, losses, initial_losses, alpha: float, lam, lr: float) -> Tuple[np.ndarray, float]:
    """One GradNorm update of the task weights; returns (new lambda, aux loss).

    Inverse training rates are L_t / L_t(0), divided by their task mean; a zero
    initial loss gives rate 1.
    """
    losses = np.asarray(losses, dtype=np.float64)
    init = np.asarray(initial_losses, dtype=np.float64)
    ratio = np.ones_like(losses)
    ok = init > 0
    ratio[ok] = losses[ok] / init[ok]
    mean_ratio = ratio.mean()
    rates = ratio / mean_ratio if mean_ratio > 0 else np.ones_like(ratio)
    aux, grad = gradnorm_aux(norms, lam, rates, alpha)
    new = np.maximum(np.asarray(lam, dtype=np.float64) - lr * grad, 1e-8)
    new *= len(new) / new.sum()
    return new, aux


@dataclass
class WeightState:
    """Mutable per-run weighting state; ``lambdas()`` gives the current weights."""

    strategy: str
    num_tasks: int
    lam: np.ndarray = None
    log_vars: List[Tensor] = None
    temperature: float = 2.0
    alpha: float = 1.5
    lr: float = 0.05
    initial_losses: np.ndarray = None
    epoch_losses: List[np.ndarray] = field(default_factory=list)
    _epoch_sum: np.ndarray = None
    _epoch_cnt: np.ndarray = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown weighting strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.lam is None:
            self.lam = np.ones(self.num_tasks)
        if self.strategy == "uw" and self.log_vars is None:
            self.log_vars = [Tensor(np.zeros(()), requires_grad=True) for _ in range(self.num_tasks)]
        self.initial_losses = np.full(self.num_tasks, np.nan)
        self._epoch_sum = np.zeros(self.num_tasks)
        self._epoch_cnt = np.zeros(self.num_tasks)

    def lambdas(self) -> np.ndarray:
        if self.strategy == "uw":
            return np.exp(-np.array([s.item() for s in self.log_vars]))
        return self.lam.copy()

    @property
    def needs_task_norms(self) -> bool:
        return self.strategy == "gradnorm"

    def observe(self, losses: np.ndarray, counts: np.ndarray) -> None:
        """Record one update's mean task losses (tasks with no examples skipped)."""
        seen = counts > 0
        fresh = seen & np.isnan(self.initial_losses)
        self.initial_losses[fresh] = losses[fresh]
        self._epoch_sum[seen] += losses[seen]
        self._epoch_cnt[seen] += 1

    def gradnorm_update(self, norms: np.ndarray, losses: np.ndarray, counts: np.ndarray) -> float:
        seen = counts > 0
        if not seen.all():
            # a task with no examples has no gradient norm this update
            return float("nan")
        init = np.nan_to_num(self.initial_losses, nan=0.0)
        self.lam, aux = gradnorm_step(norms, losses, init, self.alpha, self.lam, self.lr)
        return aux

    def end_epoch(self) -> None:
        cnt = np.maximum(self._epoch_cnt, 1)
        self.epoch_losses.append(self._epoch_sum / cnt)
        self._epoch_sum = np.zeros(self.num_tasks)
        self._epoch_cnt = np.zeros(self.num_tasks)
        if self.strategy == "dwa":
            self.lam = dwa_weights(self.epoch_losses, self.temperature, self.num_tasks)

    def sgd_update_log_vars(self, grads: Sequence[Tensor], lr: float) -> None:
        for s, g in zip(self.log_vars, grads):
            s.data = s.data - lr * g.data
            if not math.isfinite(s.item()):
                raise ad.NumericOverflowError("uncertainty log-variance diverged")
