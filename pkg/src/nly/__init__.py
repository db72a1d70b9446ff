"""Learning a multiclass classifier from noisy group label distributions."""
from .datagen import GenConfig, SyntheticTruth, generate
from .estimators import (
    MultiTaskElasticNetDistributionRegressor,
    NoisyLabelDistributionClassifier,
    RidgeDistributionRegressor,
)
from .inference import FitConfig, fit, predict
from .model import Dataset, FitResult, Hyperparams, ModelParams, VariationalParams, elbo

__all__ = [
    "Dataset",
    "FitConfig",
    "FitResult",
    "GenConfig",
    "Hyperparams",
    "ModelParams",
    "MultiTaskElasticNetDistributionRegressor",
    "NoisyLabelDistributionClassifier",
    "RidgeDistributionRegressor",
    "SyntheticTruth",
    "VariationalParams",
    "elbo",
    "fit",
    "generate",
    "predict",
]
