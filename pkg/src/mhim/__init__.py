"""Masked hard instance mining (MHIM) for attention-based multiple instance learning."""

from .aggregators import BagOutput, ClassTokenMSA, GatedAttentionMIL, build_model
from .config import ExperimentConfig, load_config
from .data import Bag, SyntheticSpec, generate, kfold, load_bagfile, write_bagfile
from .metrics import auc, optimal_threshold_metrics
from .training import TrainConfig, fit, infer, initialize, pretrain_baseline, train_step

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagOutput",
    "ClassTokenMSA",
    "ExperimentConfig",
    "GatedAttentionMIL",
    "SyntheticSpec",
    "TrainConfig",
    "auc",
    "build_model",
    "fit",
    "generate",
    "infer",
    "initialize",
    "kfold",
    "load_bagfile",
    "load_config",
    "optimal_threshold_metrics",
    "pretrain_baseline",
    "train_step",
    "write_bagfile",
]
