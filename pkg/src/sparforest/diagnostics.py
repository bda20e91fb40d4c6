"""Moran's I, its permutation test, and ERF accuracy scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .areal import ArealMap, InputError

ALTERNATIVES = ("greater", "less", "two-sided")
_BATCH = 500


def _weights(adjacency) -> sp.csr_matrix:
    if isinstance(adjacency, ArealMap):
        return adjacency.sparse()
    return sp.csr_matrix(adjacency, dtype=float)


def _centered(x, k):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != k:
        raise InputError(f"expected {k} values, got shape {x.shape}")
    if k < 2:
        raise InputError("Moran's I needs at least two units")
    xc = x - x.mean()
    ss = float(xc @ xc)
    if not ss > 1e-300 or np.ptp(x) == 0:
        raise InputError("Moran's I is undefined for a constant vector")
    return xc, ss


def morans_i(x, adjacency) -> float:
    """Global Moran's I with binary weights."""
    w = _weights(adjacency)
    k = w.shape[0]
    xc, ss = _centered(x, k)
    s0 = w.sum()
    if s0 == 0:
        raise InputError("Moran's I needs at least one neighbour pair")
    return float(k / s0 * (xc @ (w @ xc)) / ss)


@dataclass(frozen=True)
class MoranResult:
    i_stat: float
    p_value: float
    n_permutations: int
    alternative: str = "greater"


def moran_permutation_test(x, adjacency, n_permutations: int = 10000, seed: int = 0,
                           alternative: str = "greater") -> MoranResult:
    """Randomisation test of Moran's I.

    The p-value uses the add-one rule ``(1 + #extreme) / (1 + n_permutations)``.
    ``"greater"`` tests for positive autocorrelation. The two-sided version
    measures extremeness as distance from the null expectation ``-1/(K-1)``.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    if n_permutations < 1:
        raise ValueError("n_permutations must be at least 1")
    w = _weights(adjacency)
    k = w.shape[0]
    xc, ss = _centered(x, k)
    s0 = w.sum()
    if s0 == 0:
        raise InputError("Moran's I needs at least one neighbour pair")
    scale = k / s0 / ss
    observed = float(scale * (xc @ (w @ xc)))
    rng = np.random.default_rng(seed)
    expected = -1.0 / (k - 1)
    hits = 0
    done = 0
    while done < n_permutations:
        n = min(_BATCH, n_permutations - done)
        perm = rng.permuted(np.tile(xc, (n, 1)), axis=1)
        stats = scale * np.einsum("ij,ij->i", perm, (w @ perm.T).T)
        if alternative == "greater":
            hits += int(np.sum(stats >= observed - 1e-12))
        elif alternative == "less":
            hits += int(np.sum(stats <= observed + 1e-12))
        else:
            hits += int(np.sum(np.abs(stats - expected) >= abs(observed - expected) - 1e-12))
        done += n
    return MoranResult(observed, (1 + hits) / (1 + n_permutations), n_permutations, alternative)


def pearson_residuals(y, mu) -> np.ndarray:
    """``(y - mu) / sqrt(mu)`` for Poisson counts with fitted means ``mu``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return (y - mu) / np.sqrt(mu)


@dataclass(frozen=True)
class ErfAccuracy:
    bias: float
    rmse: float
    coverage: float
    miw: float


def erf_accuracy(g_true, g_hat, lower, upper) -> ErfAccuracy:
    """Bias, RMSE, pointwise coverage (percent) and mean interval width."""
    arrays = [np.asarray(a, dtype=float).ravel() for a in (g_true, g_hat, lower, upper)]
    if len({a.size for a in arrays}) != 1:
        raise ValueError("g_true, g_hat, lower and upper must have equal lengths")
    g, gh, lo, hi = arrays
    if np.any(lo > hi):
        raise ValueError("lower bounds must not exceed upper bounds")
    err = gh - g
    covered = (lo <= g) & (g <= hi)
    return ErfAccuracy(float(err.mean()), float(np.sqrt(np.mean(err * err))),
                       float(100.0 * covered.mean()), float(np.mean(hi - lo)))
