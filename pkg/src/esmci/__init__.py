"""Ensemble subsampling inference for neural-network regression under exponential families."""

from esmci.expfam import FamilySpec
from esmci.net import Network, NetworkConfig, init_network, forward, train_network
from esmci.ensemble import (
    EnsembleModel,
    SubsampleDesign,
    draw_subsamples,
    ensemble_predict,
    fit_ensemble,
    mean_estimate,
)
from esmci.infer import InferenceResult, confidence_interval, ij_variance, normal_quantile

__version__ = "0.1.0"

__all__ = [
    "EnsembleModel",
    "FamilySpec",
    "InferenceResult",
    "Network",
    "NetworkConfig",
    "SubsampleDesign",
    "confidence_interval",
    "draw_subsamples",
    "ensemble_predict",
    "fit_ensemble",
    "forward",
    "ij_variance",
    "init_network",
    "mean_estimate",
    "normal_quantile",
    "train_network",
]
