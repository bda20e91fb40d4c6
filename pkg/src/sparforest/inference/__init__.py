"""Posterior inference for the Step-2 spatial Poisson model."""

from .fitmetrics import deviance_summaries, fitted_log_risk, pointwise_loglik, waic
from .mcdiag import effective_sample_size, mcse_mean, mcse_sd, split_rhat
from .model import (
    Design,
    ModelSpec,
    ModelState,
    flatten,
    grad_log_posterior,
    initial_state,
    linear_predictor,
    log_posterior,
    make_design,
    unflatten,
)
from .sampler import PosteriorSamples, SamplerConfig, sample_posterior

__all__ = [
    "Design", "ModelSpec", "ModelState", "PosteriorSamples", "SamplerConfig",
    "deviance_summaries", "effective_sample_size", "fitted_log_risk", "flatten",
    "grad_log_posterior", "initial_state", "linear_predictor", "log_posterior",
    "make_design", "mcse_mean", "mcse_sd", "pointwise_loglik", "sample_posterior",
    "split_rhat", "unflatten", "waic",
]
