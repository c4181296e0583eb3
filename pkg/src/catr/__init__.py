"""Causal text rationales: token selection, three-head nuisance models and ATE estimators."""

from .dataset import (
    ConfounderSpec,
    DatasetFormatError,
    GroundTruth,
    TokenSequenceDataset,
    generate_semisynthetic,
    load_dataset,
    save_dataset,
)
from .estimators import ATEReport, EstimatorConfig, aipw_estimator, bootstrap_report, ipw_estimator, or_estimator
from .experiment import ExperimentConfig, run_ablation, run_experiment
from .kernels import KernelConfig, hsic_residual
from .model import CATR
from .positivity_lab import LogisticPropensity, ProxySpec, Top2PCA, run_lab
from .trainer import NuisanceEstimates, TrainConfig, TrainedModel, evaluate_nuisances, train

__version__ = "0.1.0"

__all__ = [
    "ATEReport",
    "CATR",
    "ConfounderSpec",
    "DatasetFormatError",
    "EstimatorConfig",
    "ExperimentConfig",
    "GroundTruth",
    "KernelConfig",
    "LogisticPropensity",
    "NuisanceEstimates",
    "ProxySpec",
    "TokenSequenceDataset",
    "Top2PCA",
    "TrainConfig",
    "TrainedModel",
    "aipw_estimator",
    "bootstrap_report",
    "evaluate_nuisances",
    "generate_semisynthetic",
    "hsic_residual",
    "ipw_estimator",
    "load_dataset",
    "or_estimator",
    "run_ablation",
    "run_experiment",
    "run_lab",
    "save_dataset",
    "train",
]
