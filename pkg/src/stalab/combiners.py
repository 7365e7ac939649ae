"""Combine per-task shared-parameter gradients into one update direction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

KINDS = ("sum", "pcgrad", "mgda", "cosreg")


@dataclass
class GradientBundle:
    """One flattened shared-parameter gradient per task (rows of ``grads``)."""

    tasks: Tuple[int, ...]
    grads: np.ndarray

    def __post_init__(self):
        self.grads = np.atleast_2d(np.asarray(self.grads, dtype=np.float64))
        self.tasks = tuple(self.tasks)
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("task ids in a gradient bundle must be unique")
        if self.grads.shape[0] != len(self.tasks):
            raise ValueError(f"{len(self.tasks)} task ids but {self.grads.shape[0]} gradients")
        if not np.all(np.isfinite(self.grads)):
            raise ad.NumericOverflowError("non-finite entry in gradient bundle")

    @classmethod
    def of(cls, *vectors) -> "GradientBundle":
        lengths = {len(v) for v in vectors}
        if len(lengths) != 1:
            raise ValueError(f"gradient lengths differ: {sorted(lengths)}")
        return cls(tuple(range(len(vectors))), np.vstack(vectors))

    def __len__(self):
        return len(self.tasks)

    def cosines(self) -> np.ndarray:
        """Pairwise cosine matrix; pairs with a zero vector get 0."""
        norms = np.linalg.norm(self.grads, axis=1)
        gram = self.grads @ self.grads.T
        denom = np.outer(norms, norms)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(denom > 0, gram / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(cos, -1.0, 1.0)


def combine_sum(bundle: GradientBundle, lam=None) -> np.ndarray:
    lam = np.ones(len(bundle)) if lam is None else np.asarray(lam, dtype=np.float64)
    if lam.shape != (len(bundle),):
        raise ValueError(f"need one weight per task: {lam.shape} vs {len(bundle)} tasks")
    if np.any(lam <= 0):
        raise ValueError("task weights must be positive")
    return lam @ bundle.grads


def pcgrad_project(bundle: GradientBundle, rng: np.random.Generator) -> np.ndarray:
    """Projected per-task gradients (rows), projecting against the originals."""
    g = bundle.grads
    n = len(bundle)
    if n < 2:
        raise ValueError("PCGrad needs at least two tasks")
    sq = np.einsum("ij,ij->i", g, g)
    order = rng.permutation(n)
    out = g.copy()
    for i in range(n):
        gi = out[i]
        for j in order:
            if j == i:
                continue
            if sq[j] == 0.0:
                log.warning("PCGrad: task %s has a zero gradient; skipping projection onto it", bundle.tasks[j])
                continue
            d = gi @ g[j]
            if d < 0.0:
                gi = gi - (d / sq[j]) * g[j]
        out[i] = gi
    return out


def pcgrad_combine(bundle: GradientBundle, rng: np.random.Generator) -> np.ndarray:
    return pcgrad_project(bundle, rng).sum(axis=0)


def _min_norm_pair(g11: float, g12: float, g22: float) -> float:
    """Weight on the first vector minimising |a g1 + (1-a) g2|^2, a in [0, 1]."""
    denom = g11 + g22 - 2.0 * g12
    if denom <= 0.0:
        return 0.5
    return float(np.clip((g22 - g12) / denom, 0.0, 1.0))


def _polish(gram: np.ndarray, w: np.ndarray, tol: float) -> Optional[np.ndarray]:
    """Exact minimiser on the support of ``w`` if it is feasible and optimal.

    Solves the equality-constrained problem on the active set through its KKT
    system; returns None when the support guess is wrong.
    """
    support = np.flatnonzero(w > 1e-12)
    k = support.size
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = gram[np.ix_(support, support)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or sol[:k].min() < 0.0:
        return None
    cand = np.zeros_like(w)
    cand[support] = sol[:k]
    mg = gram @ cand
    if cand @ mg - mg.min() > tol:
        return None
    return cand


def _wolfe_min_norm(gram: np.ndarray, tol: float, max_iter: int = 1000) -> np.ndarray:
    """Wolfe's min-norm-point method, run on inner products only.

    Finite and robust to affinely dependent gradients; used when Frank-Wolfe
    stops short of the tolerance.
    """
    n = gram.shape[0]
    corral = [int(np.argmin(np.diag(gram)))]
    lam = np.array([1.0])
    for _ in range(max_iter):
        mg = gram[:, corral] @ lam
        xx = lam @ mg[corral]
        j = int(np.argmin(mg))
        if xx - mg[j] <= tol or j in corral:
            break
        corral.append(j)
        lam = np.append(lam, 0.0)
        while True:
            k = len(corral)
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = gram[np.ix_(corral, corral)]
            kkt[:k, k] = 1.0
            kkt[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            alpha = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            if alpha.min() > 1e-12:
                lam = alpha
                break
            neg = alpha <= 1e-12
            theta = np.min(lam[neg] / (lam[neg] - alpha[neg]))
            lam = lam + theta * (alpha - lam)
            keep = lam > 1e-12
            keep[np.argmax(lam)] = True
            corral = [c for c, kp in zip(corral, keep) if kp]
            lam = lam[keep]
            lam = lam / lam.sum()
    w = np.zeros(n)
    w[corral] = lam
    return w


def min_norm_weights(gram: np.ndarray, tol: float = 1e-8, max_iter: int = 250) -> Tuple[np.ndarray, int, float]:
    """Simplex weights of the min-norm point in the hull of the gradients.

    Pairwise Frank-Wolfe with exact line search on the quadratic; stops when the
    duality gap ``g.Mg - min_t (Mg)_t`` drops to ``tol``. Pairwise steps can
    zig-zag near a face, so every few iterations the current support is tried
    as the exact active set. Returns ``(weights, iterations, gap)``.
    """
    n = gram.shape[0]
    if n == 2:
        a = _min_norm_pair(gram[0, 0], gram[0, 1], gram[1, 1])
        w = np.array([a, 1.0 - a])
        mg = gram @ w
        return w, 0, float(w @ mg - mg.min())
    w = np.full(n, 1.0 / n)
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        mg = gram @ w
        obj = w @ mg
        s = int(np.argmin(mg))
        gap = obj - mg[s]
        if gap <= tol:
            break
        if it % 10 == 0:
            exact = _polish(gram, w, tol)
            if exact is not None:
                w = exact
                break
        active = np.flatnonzero(w > 0)
        v = int(active[np.argmax(mg[active])])
        if v == s:
            break
        # direction e_s - e_v
        slope = mg[s] - mg[v]
        curv = gram[s, s] + gram[v, v] - 2.0 * gram[s, v]
        step = w[v] if curv <= 0 else min(w[v], -slope / curv)
        w[s] += step
        w[v] -= step
        if w[v] < 1e-300:
            w[v] = 0.0
    mg = gram @ w
    if w @ mg - mg.min() > tol:
        exact = _polish(gram, w, tol)
        if exact is None:
            exact = _wolfe_min_norm(gram, tol)
            if exact @ gram @ exact > w @ gram @ w:
                exact = w
        w = exact
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    mg = gram @ w
    return w, it, float(w @ mg - mg.min())


def mgda_combine(bundle: GradientBundle, tol: float = 1e-8, max_iter: int = 250) -> Tuple[np.ndarray, np.ndarray]:
    """(simplex weights, min-norm combined gradient)."""
    if len(bundle) < 2:
        raise ValueError("MGDA needs at least two tasks")
    g = bundle.grads
    if not np.any(g):
        return np.full(len(bundle), 1.0 / len(bundle)), np.zeros(g.shape[1])
    w, _, _ = min_norm_weights(g @ g.T, tol, max_iter)
    return w, w @ g


def cosreg_penalty(task_grads: Sequence, beta: float) -> Tensor:
    """beta * sum over task pairs of cos^2 between their gradients.

    ``task_grads`` holds, per task, either a flat numpy vector or a list of
    gradient tensors (one per shared parameter, possibly tape-recorded so the
    penalty can be differentiated w.r.t. the parameters).
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    parts = [[Tensor(g)] if isinstance(g, np.ndarray) else list(g) for g in task_grads]

    def inner(a, b):
        acc = None
        for x, y in zip(a, b):
            v = ad.dot(x, y)
            acc = v if acc is None else ad.add(acc, v)
        return acc

    sq = [inner(p, p) for p in parts]
    total = Tensor(np.zeros(()))
    for a in range(len(parts)):
        for b in range(a + 1, len(parts)):
            if sq[a].item() == 0.0 or sq[b].item() == 0.0:
                continue
            d = inner(parts[a], parts[b])
            cos2 = ad.divide(ad.square(d), ad.multiply(sq[a], sq[b]))
            total = ad.add(total, cos2)
    return ad.scale(total, beta)


def combiner_diagnostics(bundle: GradientBundle, mgda_weights: Optional[np.ndarray] = None) -> dict:
    cos = bundle.cosines()
    out = {}
    n = len(bundle)
    for a in range(n):
        for b in range(a + 1, n):
            out[f"cos_{bundle.tasks[a]}_{bundle.tasks[b]}"] = float(cos[a, b])
    if mgda_weights is not None:
        for t, w in zip(bundle.tasks, mgda_weights):
            out[f"mgda_w_{t}"] = float(w)
    return out


def pair_list(n: int) -> List[Tuple[int, int]]:
    return [(a, b) for a in range(n) for b in range(a + 1, n)]
