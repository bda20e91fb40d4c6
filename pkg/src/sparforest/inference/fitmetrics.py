"""Deviance and WAIC summaries of posterior draws."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .model import Design, ModelSpec, make_design, poisson_loglik


def _design(data, spec):
    return data if isinstance(data, Design) else make_design(data, spec)


def pointwise_loglik(samples, data, spec: ModelSpec) -> np.ndarray:
    """``(n_draws, K)`` Poisson log-likelihood at every retained draw."""
    design = _design(data, spec)
    eta = np.atleast_2d(samples.eta)
    return poisson_loglik(eta, design)


def waic_from_loglik(ll) -> tuple[float, float]:
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    if ll.shape[0] < 2:
        raise ValueError("WAIC needs at least two draws")
    lppd = logsumexp(ll, axis=0) - np.log(ll.shape[0])
    pw = ll.var(axis=0, ddof=1)
    return float(-2.0 * np.sum(lppd - pw)), float(pw.sum())


def waic(samples, data, spec: ModelSpec) -> tuple[float, float]:
    """Return ``(waic, p_w)`` using the sample variance of the log-likelihood."""
    return waic_from_loglik(pointwise_loglik(samples, data, spec))


def fitted_log_risk(samples, data, spec: ModelSpec) -> np.ndarray:
    """Log relative risk at the posterior-mean parameters.

    The confounder term is the fixed forest estimate in ``oob_offset`` mode
    and ``z @ mean(delta)`` in ``linear`` mode.
    """
    design = _design(data, spec)
    base = (np.mean(samples.beta0) + np.mean(samples.g, axis=0)
            + np.mean(samples.phi, axis=0))
    if spec.confounder_mode == "linear":
        if design.z.shape[1]:
            return base + design.z @ np.mean(samples.delta, axis=0)
        return base
    return base + spec.mhat


def deviance_summaries(samples, data, spec: ModelSpec) -> tuple[float, float]:
    """Return ``(d_bar, d_at_mean)``."""
    design = _design(data, spec)
    ll = pointwise_loglik(samples, design, spec)
    d_bar = float(np.mean(-2.0 * ll.sum(axis=1)))
    d_hat = float(-2.0 * poisson_loglik(fitted_log_risk(samples, design, spec), design).sum())
    return d_bar, d_hat
