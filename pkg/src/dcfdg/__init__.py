"""Disentangled, counterfactually fair domain generalization on a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import DomainStore, FairCircleConfig, gen_faircircle, load_tabular, split_domains
from .evaluation import ContextSpec, MetricsReport, evaluate, run_experiment, sweep_lambda_f
from .model import DomainBatch, HyperParams, build_model, total_loss
from .nets import ModelDims
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_dcfdg

__all__ = [
    "ContextSpec", "DomainBatch", "DomainStore", "FairCircleConfig", "HyperParams", "MetricsReport",
    "ModelDims", "TrainConfig", "build_model", "evaluate", "gen_faircircle", "load_checkpoint",
    "load_tabular", "run_experiment", "save_checkpoint", "split_domains", "sweep_lambda_f",
    "total_loss", "train_dcfdg",
]
