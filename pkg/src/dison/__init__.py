"""Isolation networks for out-of-distribution detection, centralized and two-node decentralized."""
from .data import AugmentPolicy, Dataset, SyntheticConfig, generate
from .experiment import ExperimentConfig, run_experiment, run_sweep, verify_report
from .isolation import ConvergenceConfig, run_centralized
from .metrics import auroc, fpr_at_tpr, msp_score, quantiles
from .nn import NetworkSpec, OptimizerState, ParameterVector, init_params
from .pretrain import PretrainConfig, pretrain
from .protocol import RoundPlan, run_dison

__all__ = [
    "AugmentPolicy", "ConvergenceConfig", "Dataset", "ExperimentConfig", "NetworkSpec",
    "OptimizerState", "ParameterVector", "PretrainConfig", "RoundPlan", "SyntheticConfig",
    "auroc", "fpr_at_tpr", "generate", "init_params", "msp_score", "pretrain", "quantiles",
    "run_centralized", "run_dison", "run_experiment", "run_sweep", "verify_report",
]
