"""Triadic co-training on frozen two-view embeddings.

Two dropout-MLP students exchange MI-filtered pseudo-labels across views, a
non-parametric generator attacks their decision boundaries inside an
L-infinity budget, and a meta-learned teacher tunes the acceptance threshold
and loss weights against a held-out validation split. The game module checks
the equilibrium structure of trained configurations empirically.
"""

from .data import BatchIterator, BatchPlan, TwoViewDataset, gen_synthetic_two_view, make_splits
from .engine import StepReport, TrainConfig, TrainingReport, evaluate, run_training
from .errors import (
    ConfigError,
    FormatError,
    InsufficientHistoryError,
    InvalidInputError,
    OracleFailureError,
)
from .game import GameProfile, TrainedTriadicGame, nash_residual, stackelberg_residual
from .generator import PerturbConfig, Perturbation, pgd_perturb, project_linf
from .numerics import cross_entropy, entropy, finite_diff_grad, softmax
from .student import DropoutMask, OptimizerState, StudentParams, init_student
from .teacher import TeacherStrategy, init_strategy, map_strategy, soft_gate
from .uncertainty import UncertaintyEstimate, confidence_filter, mi_filter, mutual_information

__version__ = "0.1.0"

__all__ = [
    "BatchIterator",
    "BatchPlan",
    "ConfigError",
    "DropoutMask",
    "FormatError",
    "GameProfile",
    "InsufficientHistoryError",
    "InvalidInputError",
    "OptimizerState",
    "OracleFailureError",
    "PerturbConfig",
    "Perturbation",
    "StepReport",
    "StudentParams",
    "TeacherStrategy",
    "TrainConfig",
    "TrainedTriadicGame",
    "TrainingReport",
    "TwoViewDataset",
    "UncertaintyEstimate",
    "confidence_filter",
    "cross_entropy",
    "entropy",
    "evaluate",
    "finite_diff_grad",
    "gen_synthetic_two_view",
    "init_strategy",
    "init_student",
    "make_splits",
    "map_strategy",
    "mi_filter",
    "mutual_information",
    "nash_residual",
    "pgd_perturb",
    "project_linf",
    "run_training",
    "soft_gate",
    "softmax",
    "stackelberg_residual",
]
