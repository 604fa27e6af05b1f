"""Extended multicalibration with joint grouping functions, and the MC-Pseudolabel post-processing algorithm."""

from .core import DataError, Dataset, LinearPredictor, NumericalError, RunConfig, load_dataset, predict, write_dataset
from .discretize import BinSpec, LevelPartition, choose_bins, level_sets, round_predictions
from .gaussian import BlockCov, compute_M, compute_stars, hat_iteration, iteration_table, psi_log_norms, target_coeffs
from .grouping import (
    GroupingBasis,
    constant_basis,
    env_basis,
    eval_pseudolabels,
    fit_on_levelsets,
    jtt_basis,
    linear_basis,
)
from .metrics import McReport, mc_error, mc_error_over_class, post_processing_gap, rmse
from .oracles import EnvClassifier, fit_env_classifier, ols_fit
from .pseudolabel import RunTrace, certify, erm, run
from .synth import ScmConfig, generate_gaussian, generate_scm

__version__ = "0.1.0"

__all__ = [
    "BinSpec", "BlockCov", "DataError", "Dataset", "EnvClassifier", "GroupingBasis", "LevelPartition",
    "LinearPredictor", "McReport", "NumericalError", "RunConfig", "RunTrace", "ScmConfig",
    "certify", "choose_bins", "compute_M", "compute_stars", "constant_basis", "env_basis", "erm",
    "eval_pseudolabels", "fit_env_classifier", "fit_on_levelsets", "generate_gaussian", "generate_scm",
    "hat_iteration", "iteration_table", "psi_log_norms", "jtt_basis", "level_sets", "linear_basis", "load_dataset",
    "mc_error", "mc_error_over_class", "ols_fit", "post_processing_gap", "predict", "rmse",
    "round_predictions", "run", "target_coeffs", "write_dataset",
]
