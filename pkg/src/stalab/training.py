"""One-seed training loop shared by the runner, baselines and profilers."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .allocation import AllocationMode, SubStepAllocation, plan_step
from .autodiff import NumericOverflowError, Tape, Tensor
from .combiners import GradientBundle, cosreg_penalty, mgda_combine, pcgrad_combine, combiner_diagnostics
from .model import DecoderSpec, EncoderSpec, MultiTaskModel, TaskLossSpec, task_loss
from .rng import STREAM_ALLOC, STREAM_COMBINER, STREAM_DATA, STREAM_INIT, stream
from .synthbench import Dataset, Split, evaluate
from .weighting import WeightState


class DivergenceError(ArithmeticError):
    pass


def loss_specs_for(ds: Dataset, kinds: Optional[Sequence[str]] = None,
                   weights: Optional[Sequence[float]] = None) -> List[TaskLossSpec]:
    out = []
    for t, kind in enumerate(ds.task_kinds()):
        lk = kinds[t] if kinds else ("cross_entropy" if kind == "classification" else "mse")
        spec = TaskLossSpec(t, lk, float(weights[t]) if weights else 1.0)
        if not spec.compatible_with(kind):
            raise ValueError(f"task {t}: loss {lk} does not fit a {kind} head")
        out.append(spec)
    return out


def build_model(ds: Dataset, hidden, activation: str, seed: int) -> MultiTaskModel:
    enc = EncoderSpec(ds.spec.input_dim, tuple(hidden), activation)
    decs = [DecoderSpec(t, dim, "classification" if k == "classification" else "regression")
            for t, (dim, k) in enumerate(zip(ds.output_dims(), ds.task_kinds()))]
    return MultiTaskModel.init(enc, decs, stream(seed, STREAM_INIT), tie_heads=ds.spec.duplicate_tasks)


class BatchSampler:
    """Shuffled passes over ``n`` examples in batches of ``m`` (last partial batch dropped)."""

    def __init__(self, n: int, m: int, seed: int):
        self.n, self.m, self.seed = n, m, seed
        self.epoch = -1
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.per_epoch = max(1, n // m)
        self._taken = self.per_epoch

    def next(self):
        """Returns (indices, new_epoch_started)."""
        started = False
        if self._taken >= self.per_epoch:
            self.epoch += 1
            self._perm = stream(self.seed, STREAM_DATA, self.epoch).permutation(self.n)
            self._taken = 0
            started = True
        size = min(self.m, self.n)
        idx = self._perm[self._taken * self.m:self._taken * self.m + size]
        self._taken += 1
        return idx, started


@dataclass
class StepResult:
    total: float
    task_losses: np.ndarray
    counts: np.ndarray
    shared_grad: np.ndarray
    other_grads: Dict[str, np.ndarray]
    log_var_grads: Optional[List[np.ndarray]] = None
    bundle: Optional[GradientBundle] = None
    diagnostics: dict = field(default_factory=dict)


def compute_step(
    model: MultiTaskModel,
    split: Split,
    idx: np.ndarray,
    alloc: SubStepAllocation,
    specs: Sequence[TaskLossSpec],
    lam: np.ndarray,
    *,
    weights: Optional[WeightState] = None,
    combiner: str = "sum",
    beta: float = 0.0,
    normalization: str = "count",
    combiner_rng: Optional[np.random.Generator] = None,
    want_bundle: bool = False,
) -> StepResult:
    """Loss, per-task shared gradients and the combined update direction.

    Loss is (1/T) * sum_t lambda_t * l_t with l_t the mean task loss over the
    examples allocated to t (``normalization='sum'`` uses the running sum).
    """
    T = alloc.num_tasks
    m = alloc.batch_size
    groups = alloc.groups()
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    shared, per_task = model.partition_parameters()
    uw = weights is not None and weights.strategy == "uw"
    need_tasks = want_bundle or combiner != "sum" or (weights is not None and weights.needs_task_norms)

    x = split.x[idx]
    everyone = np.arange(m)
    task_losses = np.full(T, np.nan)
    terms: Dict[int, Tensor] = {}
    with Tape() as tape:
        z = model.encode(Tensor(x))
        for t in range(T):
            if counts[t] == 0:
                continue
            g = groups[t]
            zt = z if counts[t] == m and np.array_equal(g, everyone) else ad.take_rows(z, g)
            pred = model.decode(zt, t)
            raw = task_loss(pred, split.targets[t][idx[g]], specs[t])
            task_losses[t] = raw.item()
            eff = ad.scale(raw, float(counts[t])) if normalization == "sum" else raw
            if uw:
                s = weights.log_vars[t]
                term = ad.add(ad.multiply(ad.exp(ad.scale(s, -1.0)), eff), ad.scale(s, 0.5))
                term = ad.scale(term, 1.0 / T)
            else:
                term = ad.scale(eff, float(lam[t]) * specs[t].weight / T)
            terms[t] = term
        present = sorted(terms)
        total = terms[present[0]]
        for t in present[1:]:
            total = ad.add(total, terms[t])

        shared_tensors = [model.params[p] for p in shared]
        other_paths = [p for t in per_task for p in per_task[t]]
        extra = list(weights.log_vars) if uw else []
        wrt_other = [model.params[p] for p in other_paths] + extra

        if not need_tasks:
            gs = ad.backward(tape, total, shared_tensors + wrt_other)
            vals = [gs[i].data for i in range(len(gs))]
            shared_grad = np.concatenate([v.reshape(-1) for v in vals[:len(shared)]])
            rest = vals[len(shared):]
            return StepResult(
                total.item(), task_losses, counts, shared_grad,
                dict(zip(other_paths, rest[:len(other_paths)])),
                rest[len(other_paths):] if uw else None,
            )

        cosreg = combiner == "cosreg"
        rows, recorded = [], []
        for t in present:
            gt = ad.backward(tape, terms[t], shared_tensors, create_graph=cosreg)
            parts = [gt[i] for i in range(len(shared))]
            recorded.append(parts)
            rows.append(np.concatenate([p.data.reshape(-1) for p in parts]))
        bundle = GradientBundle(tuple(present), np.vstack(rows))
        diag = combiner_diagnostics(bundle) if len(present) > 1 else {}

        if combiner == "sum" or len(present) == 1:
            shared_grad = bundle.grads.sum(axis=0)
        elif combiner == "pcgrad":
            shared_grad = pcgrad_combine(bundle, combiner_rng)
        elif combiner == "mgda":
            w, shared_grad = mgda_combine(bundle)
            diag.update(combiner_diagnostics(bundle, w))
        elif combiner == "cosreg":
            shared_grad = bundle.grads.sum(axis=0)
            pen = cosreg_penalty(recorded, beta)
            diag["cosreg_penalty"] = pen.item()
            if pen.tape is tape:
                pg = ad.backward(tape, pen, shared_tensors)
                shared_grad = shared_grad + np.concatenate([pg[i].data.reshape(-1) for i in range(len(shared))])
        else:
            raise ValueError(f"unknown combiner {combiner!r}")

        og = ad.backward(tape, total, wrt_other)
        vals = [og[i].data for i in range(len(wrt_other))]

    return StepResult(
        total.item(), task_losses, counts, shared_grad,
        dict(zip(other_paths, vals[:len(other_paths)])),
        vals[len(other_paths):] if uw else None,
        bundle, diag,
    )


def predict(model: MultiTaskModel, x: np.ndarray) -> Dict[int, np.ndarray]:
    with ad.no_record():
        return {t: p.data for t, p in model.forward(Tensor(x)).items()}


def evaluate_model(model: MultiTaskModel, ds: Dataset, tasks: Optional[Sequence[int]] = None) -> Dict[int, float]:
    preds = predict(model, ds.eval.x)
    tasks = model.tasks if tasks is None else tasks
    out = {}
    for t in tasks:
        metric = ds.metrics[t]
        out[t] = evaluate(preds[t], ds.eval.targets[t], metric)
    return out


def num_updates(mode: AllocationMode, steps: int, num_tasks: int) -> int:
    return steps * mode.updates_per_step(num_tasks)


def fresh_batches(mode: AllocationMode, num_tasks: int, n_train: int, batch_size: int,
                  steps: Optional[int], epochs: Optional[float], equal_steps: bool = False) -> int:
    """Number of fresh batches (outer steps) a run draws.

    An epoch is one pass over all ``n * T`` annotations, so STA with subset
    size k needs T/k times as many batches as FT per epoch. ``equal_steps``
    (FT only) stretches FT to the update count of ISTA with the same k.
    """
    if steps is not None:
        base = int(steps)
    else:
        per_epoch = max(1, n_train // batch_size)
        if mode.kind in ("FT", "ISTA"):
            covered = num_tasks
        elif mode.kind == "STA":
            covered = mode.k
        else:
            covered = min(2 * mode.k, num_tasks) if mode.complement else 2 * mode.k
        base = max(1, int(math.ceil(epochs * per_epoch * num_tasks / covered - 1e-9)))
    if equal_steps:
        base *= math.ceil(num_tasks / mode.k)
    return base


@dataclass
class RunLog:
    rows: List[dict] = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    updates: int = 0
    metrics: Dict[int, float] = field(default_factory=dict)
    lambdas: List[List[float]] = field(default_factory=list)
    cosines: List[float] = field(default_factory=list)
    seconds: float = 0.0
    model: Optional[MultiTaskModel] = None


def train_seed(
    ds: Dataset,
    *,
    seed: int,
    mode: AllocationMode,
    steps: int,
    lr: float,
    batch_size: int,
    hidden=(32,),
    activation: str = "relu",
    specs: Optional[Sequence[TaskLossSpec]] = None,
    strategy: str = "uniform",
    temperature: float = 2.0,
    alpha: float = 1.5,
    weight_lr: Optional[float] = None,
    combiner: str = "sum",
    beta: float = 0.05,
    normalization: str = "count",
    eval_every: int = 0,
    tasks: Optional[Sequence[int]] = None,
    model: Optional[MultiTaskModel] = None,
    log_rows: bool = True,
    on_plan=None,
) -> RunLog:
    """Plain gradient descent for ``steps`` fresh batches.

    ``tasks`` restricts training to a subset of the dataset's tasks (used for
    single-task baselines; a one-task run always uses every example).
    """
    start = time.perf_counter()
    tasks = list(range(ds.num_tasks)) if tasks is None else list(tasks)
    sub = restrict_tasks(ds, tasks)
    T = sub.num_tasks
    specs = list(specs) if specs is not None else loss_specs_for(sub)
    if model is None:
        model = build_model(sub, hidden, activation, seed)
    weights = WeightState(strategy, T, temperature=temperature, alpha=alpha,
                          lr=lr if weight_lr is None else weight_lr)
    sampler = BatchSampler(len(sub.train), batch_size, seed)
    full_alloc = None
    log = RunLog()
    pending: Dict[int, list] = {}
    update = 0

    def run_update(idx, alloc):
        nonlocal update
        lam = weights.lambdas()
        res = compute_step(
            model, sub.train, idx, alloc, specs, lam, weights=weights, combiner=combiner, beta=beta,
            normalization=normalization, combiner_rng=stream(seed, STREAM_COMBINER, update),
        )
        if not math.isfinite(res.total):
            raise NumericOverflowError("non-finite loss")
        weights.observe(res.task_losses, res.counts)
        if weights.needs_task_norms and res.bundle is not None:
            norms = np.zeros(T)
            for row, t in zip(res.bundle.grads, res.bundle.tasks):
                scale = lam[t] * specs[t].weight / T
                if normalization == "sum":
                    scale *= res.counts[t]
                norms[t] = np.linalg.norm(row) / scale
            weights.gradnorm_update(norms, res.task_losses, res.counts)
        shared, _ = model.partition_parameters()
        model.params.load_flat(model.params.flatten(shared) - lr * res.shared_grad, shared)
        for p, g in res.other_grads.items():
            model.params[p].data = model.params[p].data - lr * g
        if res.log_var_grads is not None:
            weights.sgd_update_log_vars([Tensor(g) for g in res.log_var_grads], lr)
        if log_rows:
            row = {"step": update, "loss_total": res.total}
            for t in range(T):
                row[f"loss_{tasks[t]}"] = res.task_losses[t] if res.counts[t] else None
            for t, v in enumerate(lam):
                row[f"lambda_{tasks[t]}"] = float(v)
            log.rows.append(row)
        if "cos_0_1" in res.diagnostics:
            log.cosines.append(res.diagnostics["cos_0_1"])
        update += 1
        if eval_every and update % eval_every == 0:
            _eval_row(model, sub, tasks, update, log)

    try:
        for step in range(steps):
            idx, new_epoch = sampler.next()
            if new_epoch and step > 0:
                weights.end_epoch()
            if T == 1:
                if full_alloc is None or full_alloc.batch_size != len(idx):
                    full_alloc = SubStepAllocation((frozenset({0}),) * len(idx), 1)
                plan = [full_alloc]
            else:
                plan = plan_step(mode, len(idx), T, stream(seed, STREAM_ALLOC, step))
            if on_plan is not None:
                on_plan(step, idx, plan)
            now = []
            for a in plan:
                if a.delay:
                    pending.setdefault(step + a.delay, []).append((idx, a))
                else:
                    now.append((idx, a))
            for idx_a, a in pending.pop(step, []) + now:
                run_update(idx_a, a)
        for due in sorted(pending):
            for idx_a, a in pending[due]:
                run_update(idx_a, a)
        pending.clear()
        log.metrics = {tasks[t]: v for t, v in evaluate_model(model, sub).items()}
        already = eval_every and update and update % eval_every == 0
        if log_rows and not already:
            row = {"step": update}
            row.update({f"metric_{t}": v for t, v in log.metrics.items()})
            log.rows.append(row)
    except (NumericOverflowError, FloatingPointError) as e:
        log.status = "diverged"
        log.error = str(e)
    log.updates = update
    log.lambdas = weights.lambdas().tolist()
    log.seconds = time.perf_counter() - start
    log.model = model
    return log


def _eval_row(model, ds, tasks, update, log):
    metrics = evaluate_model(model, ds)
    row = {"step": update}
    row.update({f"metric_{tasks[t]}": v for t, v in metrics.items()})
    log.rows.append(row)


def restrict_tasks(ds: Dataset, tasks: Sequence[int]) -> Dataset:
    if list(tasks) == list(range(ds.num_tasks)):
        return ds
    from dataclasses import replace

    spec = replace(ds.spec, tasks=tuple(ds.spec.tasks[t] for t in tasks))
    metrics = [replace(ds.metrics[t], task=i) for i, t in enumerate(tasks)]
    return Dataset(spec, ds.seed,
                   Split(ds.train.x, [ds.train.targets[t] for t in tasks]),
                   Split(ds.eval.x, [ds.eval.targets[t] for t in tasks]),
                   metrics)
