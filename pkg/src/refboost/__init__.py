"""refboost: add-on neural controllers that provably preserve reference tracking.

A base system that already tracks its references is augmented through an
internal-model loop with a trainable boost operator. Any operator whose
outputs die out with the disturbance keeps tracking intact, so transient
performance can be optimized by unconstrained gradient descent; a small-gain
analysis extends the guarantee to imperfect models.
"""

from .boost import BoostOperator, BoundedMlp
from .closedloop import RolloutResult, completeness_check, rollout
from .config import ExperimentConfig, load_config, save_config
from .plant import (
    DisturbanceSpec,
    Layout,
    MismatchSpec,
    Obstacles,
    Plant,
    RobotParams,
    corridor_layout,
    get_layout,
    mountain_range_layout,
    sample_disturbance,
    sample_reference,
)
from .ren import RenDims, RenParams, RenRealization
from .robust import GainReport, closed_loop_bounds, theorem2_condition, validate_robust_tracking
from .signals import Signal, check_causality, lp_norm, tail_energy
from .train import LossSpec, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BoostOperator",
    "BoundedMlp",
    "RolloutResult",
    "completeness_check",
    "rollout",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "DisturbanceSpec",
    "Layout",
    "MismatchSpec",
    "Obstacles",
    "Plant",
    "RobotParams",
    "corridor_layout",
    "get_layout",
    "mountain_range_layout",
    "sample_disturbance",
    "sample_reference",
    "RenDims",
    "RenParams",
    "RenRealization",
    "GainReport",
    "closed_loop_bounds",
    "theorem2_condition",
    "validate_robust_tracking",
    "Signal",
    "check_causality",
    "lp_norm",
    "tail_energy",
    "LossSpec",
    "TrainConfig",
    "evaluate",
    "train",
]
