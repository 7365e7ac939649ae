"""Multi-task learning lab: stochastic task allocation, baselines and gradient-angle telemetry."""

from .allocation import AllocationMode, SubStepAllocation, plan_step
from .autodiff import ParameterStore, Tape, Tensor, backward, finite_diff_check
from .config import ConfigError, ExperimentConfig
from .mtl_gain import delta_mtl, delta_mtl_relative
from .model import MultiTaskModel
from .synthbench import SyntheticTaskSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AllocationMode", "ConfigError", "ExperimentConfig", "MultiTaskModel", "ParameterStore",
    "SubStepAllocation", "SyntheticTaskSpec", "Tape", "Tensor", "backward", "delta_mtl",
    "delta_mtl_relative", "finite_diff_check", "generate", "plan_step",
]
