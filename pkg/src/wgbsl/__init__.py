"""Robust Bayesian synthetic likelihood with Wasserstein Gaussianization and VB."""
from .slcore import SyntheticLikelihoodEstimate, sample_moments, synthetic_log_lik
from .gmm import GaussianMixture
from .wgflow import WGConfig, WGTransform
from .vb import VBConfig, VariationalParams
from .mcmc import MCMCConfig
from .harness import ExperimentConfig

__version__ = "0.1.0"

__all__ = [
    "SyntheticLikelihoodEstimate",
    "sample_moments",
    "synthetic_log_lik",
    "GaussianMixture",
    "WGConfig",
    "WGTransform",
    "VBConfig",
    "VariationalParams",
    "MCMCConfig",
    "ExperimentConfig",
]
