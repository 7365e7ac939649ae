"""Hard-parameter-sharing MLP: one encoder, one linear decoder per task."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CHECKPOINT_FORMAT = "stalab-checkpoint"
CHECKPOINT_VERSION = 1

LOSS_KINDS = ("mse", "l1", "cross_entropy")


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: Tuple[int, ...] = (32,)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("encoder needs at least one hidden layer with positive width")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class DecoderSpec:
    task: int
    output_dim: int
    head: str = "regression"

    def __post_init__(self):
        if self.head not in ("regression", "classification"):
            raise ValueError(f"unknown head kind {self.head!r}")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.head == "classification" and self.output_dim < 2:
            raise ValueError("classification heads need at least 2 classes")


@dataclass(frozen=True)
class TaskLossSpec:
    task: int
    kind: str = "mse"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.weight > 0:
            raise ValueError("task weight must be positive")

    def compatible_with(self, head: str) -> bool:
        return (self.kind == "cross_entropy") == (head == "classification")


def _shared_prefix(i: int) -> str:
    return f"shared/layer{i:02d}"


def _task_prefix(t: int) -> str:
    return f"task/{t:02d}"


@dataclass
class MultiTaskModel:
    encoder: EncoderSpec
    decoders: List[DecoderSpec]
    params: ParameterStore = field(default_factory=ParameterStore)

    @classmethod
    def init(cls, encoder: EncoderSpec, decoders: Sequence[DecoderSpec], rng: np.random.Generator,
             tie_heads: bool = False):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.

        ``tie_heads`` gives every decoder a copy of the first decoder's initial
        values (heads still train independently afterwards).
        """
        ids = [d.task for d in decoders]
        if len(set(ids)) != len(ids):
            raise ValueError("decoder task ids must be unique")
        model = cls(encoder, list(decoders))
        widths = (encoder.input_dim,) + encoder.hidden
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            model.params[f"{_shared_prefix(i)}/weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            model.params[f"{_shared_prefix(i)}/bias"] = rng.uniform(-bound, bound, fan_out)
        fan_in = widths[-1]
        bound = 1.0 / np.sqrt(fan_in)
        first = None
        for d in decoders:
            if tie_heads and first is not None and first[0].shape[1] == d.output_dim:
                w, b = first[0].copy(), first[1].copy()
            else:
                w = rng.uniform(-bound, bound, (fan_in, d.output_dim))
                b = rng.uniform(-bound, bound, d.output_dim)
                first = first or (w, b)
            model.params[f"{_task_prefix(d.task)}/weight"] = w
            model.params[f"{_task_prefix(d.task)}/bias"] = b
        return model

    @property
    def tasks(self) -> List[int]:
        return [d.task for d in self.decoders]

    def encode(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        if h.shape[1] != self.encoder.input_dim:
            raise ad.ShapeError(f"input has {h.shape[1]} features, encoder expects {self.encoder.input_dim}")
        act = ad.tanh if self.encoder.activation == "tanh" else ad.relu
        for i in range(len(self.encoder.hidden)):
            pre = ad.matmul(h, self.params[f"{_shared_prefix(i)}/weight"])
            h = act(ad.add(pre, self.params[f"{_shared_prefix(i)}/bias"]))
        return h

    def decode(self, z: Tensor, task: int) -> Tensor:
        p = _task_prefix(task)
        return ad.add(ad.matmul(z, self.params[f"{p}/weight"]), self.params[f"{p}/bias"])

    def forward(self, x, tasks: Sequence[int] = None) -> Dict[int, Tensor]:
        """Per-task predictions; the encoder runs once for the whole batch."""
        z = self.encode(x)
        return {t: self.decode(z, t) for t in (self.tasks if tasks is None else tasks)}

    def partition_parameters(self) -> Tuple[List[str], Dict[int, List[str]]]:
        shared = self.params.paths("shared/")
        per_task = {t: self.params.paths(_task_prefix(t) + "/") for t in self.tasks}
        return shared, per_task

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel(self.encoder, list(self.decoders), self.params.copy())

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        """JSON text checkpoint; floats are written with round-trip precision."""
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "encoder": {"input_dim": self.encoder.input_dim, "hidden": list(self.encoder.hidden),
                        "activation": self.encoder.activation},
            "decoders": [{"task": d.task, "output_dim": d.output_dim, "head": d.head} for d in self.decoders],
            "params": {p: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                       for p, t in self.params.items()},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "MultiTaskModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        enc = EncoderSpec(doc["encoder"]["input_dim"], tuple(doc["encoder"]["hidden"]),
                          doc["encoder"]["activation"])
        decs = [DecoderSpec(**d) for d in doc["decoders"]]
        params = ParameterStore({p: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                                 for p, v in doc["params"].items()})
        return cls(enc, decs, params)


def task_loss(pred: Tensor, target, spec: TaskLossSpec) -> Tensor:
    """Per-example mean loss of one task (unweighted)."""
    if spec.kind == "cross_entropy":
        return ad.softmax_cross_entropy(pred, np.asarray(target))
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
    t = Tensor(target)
    if t.shape != pred.shape:
        raise ad.ShapeError(f"{spec.kind}: predictions {pred.shape} vs targets {t.shape}")
    if spec.kind == "l1":
        return ad.l1_distance(pred, t)
    return ad.mean(ad.square(ad.sub(pred, t)))
