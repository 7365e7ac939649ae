"""Experiment configuration: YAML file <-> nested dataclasses.

Every key is documented in README.md; unknown keys raise ConfigError.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .allocation import MODES, AllocationMode
from .combiners import KINDS as COMBINERS
from .model import EncoderSpec
from .synthbench import SyntheticTaskSpec, TaskDef
from .weighting import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass
class BenchmarkConfig:
    input_dim: int = 16
    teacher_width: int = 32
    relatedness: float = 0.9
    tasks: List[dict] = field(default_factory=lambda: [
        {"kind": "regression", "noise": 0.1},
        {"kind": "classification", "classes": 4},
    ])
    n_train: int = 2000
    n_eval: int = 1000
    duplicate_tasks: bool = False
    seed: int = 0
    # load an exported CSV instead of generating
    dataset_path: Optional[str] = None

    def spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            input_dim=self.input_dim, teacher_width=self.teacher_width, relatedness=self.relatedness,
            tasks=tuple(TaskDef(**t) for t in self.tasks), n_train=self.n_train, n_eval=self.n_eval,
            duplicate_tasks=self.duplicate_tasks,
        )


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [32])
    activation: str = "relu"
    # per-task loss kind override: mse | l1 | cross_entropy (default from task kind)
    losses: Optional[List[str]] = None
    task_weights: Optional[List[float]] = None
    checkpoint: Optional[str] = None


@dataclass
class AllocationConfig:
    mode: str = "FT"
    k: int = 1
    gap: int = 2
    complement: bool = False

    def mode_obj(self) -> AllocationMode:
        return AllocationMode(self.mode, self.k, self.gap, self.complement)


@dataclass
class WeightingConfig:
    strategy: str = "uniform"
    temperature: float = 2.0
    alpha: float = 1.5
    # GradNorm weight learning rate; null means the main learning rate
    lr: Optional[float] = None


@dataclass
class CombinerConfig:
    kind: str = "sum"
    beta: float = 0.05


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    batch_size: int = 32
    # exactly one of steps (fresh batches) or epochs (passes over all annotations)
    steps: Optional[int] = 5000
    epochs: Optional[float] = None
    # count: l_t is the mean over allocated examples; sum: literal running sum
    loss_normalization: str = "count"


@dataclass
class ProfileConfig:
    epochs: int = 2
    mode: Optional[str] = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    combiner: CombinerConfig = field(default_factory=CombinerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    equal_steps: bool = False
    seeds: List[int] = field(default_factory=lambda: [0])
    eval_every: int = 0
    jobs: int = 1
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    output_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        try:
            spec = self.benchmark.spec()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"benchmark: {e}") from None
        T = spec.num_tasks
        if self.optimizer.batch_size < 1:
            raise ConfigError("optimizer.batch_size must be >= 1")
        if not self.optimizer.lr > 0:
            raise ConfigError("optimizer.lr must be positive")
        if (self.optimizer.steps is None) == (self.optimizer.epochs is None):
            raise ConfigError("set exactly one of optimizer.steps and optimizer.epochs")
        if self.optimizer.steps is not None and self.optimizer.steps < 1:
            raise ConfigError("optimizer.steps must be >= 1")
        if self.optimizer.epochs is not None and not self.optimizer.epochs > 0:
            raise ConfigError("optimizer.epochs must be positive")
        if self.optimizer.loss_normalization not in ("count", "sum"):
            raise ConfigError("optimizer.loss_normalization must be 'count' or 'sum'")
        if self.allocation.mode not in MODES:
            raise ConfigError(f"allocation.mode must be one of {MODES}")
        try:
            self.allocation.mode_obj().validate(T)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.weighting.strategy not in STRATEGIES:
            raise ConfigError(f"weighting.strategy must be one of {STRATEGIES}")
        if self.combiner.kind not in COMBINERS:
            raise ConfigError(f"combiner.kind must be one of {COMBINERS}")
        if self.combiner.beta < 0:
            raise ConfigError("combiner.beta must be >= 0")
        if self.weighting.temperature <= 0:
            raise ConfigError("weighting.temperature must be positive")
        if self.combiner.kind != "sum" and T < 2:
            raise ConfigError("gradient combiners need at least two tasks")
        if self.model.losses is not None and len(self.model.losses) != T:
            raise ConfigError("model.losses needs one entry per task")
        if self.model.task_weights is not None:
            if len(self.model.task_weights) != T or any(w <= 0 for w in self.model.task_weights):
                raise ConfigError("model.task_weights needs one positive entry per task")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.profile.mode is not None and self.profile.mode not in ("FT", "STA", "ISTA"):
            raise ConfigError("profile.mode must be FT, STA or ISTA")
        if self.equal_steps and self.allocation.mode != "FT":
            raise ConfigError("equal_steps applies to FT runs only")
        try:
            EncoderSpec(spec.input_dim, tuple(self.model.hidden), self.model.activation)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}" if where else key) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


_NESTED = {
    (ExperimentConfig, "benchmark"): BenchmarkConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "allocation"): AllocationConfig,
    (ExperimentConfig, "weighting"): WeightingConfig,
    (ExperimentConfig, "combiner"): CombinerConfig,
    (ExperimentConfig, "optimizer"): OptimizerConfig,
    (ExperimentConfig, "profile"): ProfileConfig,
}


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    opt = data.get("optimizer")
    # giving epochs alone switches the budget away from the default step count
    if isinstance(opt, dict) and "epochs" in opt and "steps" not in opt:
        data["optimizer"] = dict(opt, steps=None)
    cfg = _build(ExperimentConfig, data, "")
    try:
        return cfg.validate()
    except TypeError as e:
        # e.g. a string where a number belongs
        raise ConfigError(f"config: {e}") from None


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = from_dict(data or {})
    if cfg.benchmark.dataset_path and not Path(cfg.benchmark.dataset_path).is_absolute():
        cfg.benchmark.dataset_path = str((path.parent / cfg.benchmark.dataset_path).resolve())
    if cfg.model.checkpoint and not Path(cfg.model.checkpoint).is_absolute():
        cfg.model.checkpoint = str((path.parent / cfg.model.checkpoint).resolve())
    if cfg.output_dir and not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str((path.parent / cfg.output_dir).resolve())
    return cfg


def dump(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
