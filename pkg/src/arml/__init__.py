"""Robust Mahalanobis metric learning for K-NN classifiers.

Train a metric whose K-NN classifier resists l2 input perturbations,
certify per-instance robustness (exactly for 1-NN), attack models for
upper bounds, and build certified/empirical robust-error curves.
"""

__version__ = "0.1.0"

from .attack import AttackResult, attack_bounds, boundary_attack, empirical_curve
from .certify import (
    CertificationResult,
    RobustErrorCurve,
    certification_bounds,
    certified_curve,
    knn_lower_bound,
    triplet_epsilon,
)
from .dataset import Dataset, dump_libsvm, load_dataset, parse_libsvm, sample_subset
from .exact_1nn import (
    Exact1NNSolver,
    exact_minimal_perturbation,
    gcd_qp,
    inner_minimal_perturbation,
)
from .knn import KnnModel, clean_error, predict, predict_batch
from .metric import MetricFactor, load_metric, mahalanobis_distance, save_metric
from .trainer import LossFn, TrainConfig, objective_and_gradient, randnear_pair, train

__all__ = [
    "AttackResult",
    "CertificationResult",
    "Dataset",
    "Exact1NNSolver",
    "KnnModel",
    "LossFn",
    "MetricFactor",
    "RobustErrorCurve",
    "TrainConfig",
    "attack_bounds",
    "boundary_attack",
    "certification_bounds",
    "certified_curve",
    "clean_error",
    "dump_libsvm",
    "empirical_curve",
    "exact_minimal_perturbation",
    "gcd_qp",
    "inner_minimal_perturbation",
    "knn_lower_bound",
    "load_dataset",
    "load_metric",
    "mahalanobis_distance",
    "objective_and_gradient",
    "parse_libsvm",
    "predict",
    "predict_batch",
    "randnear_pair",
    "sample_subset",
    "save_metric",
    "train",
    "triplet_epsilon",
]
