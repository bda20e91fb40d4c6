"""Convergence and Monte Carlo error diagnostics for chain output."""

from __future__ import annotations

import numpy as np


def split_rhat(chains) -> float:
    """Split potential scale reduction factor.

    ``chains`` has shape ``(n_chains, n_draws)``; each chain is cut in
    half and the halves are treated as separate chains.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1] // 2
    if n < 2:
        return np.nan
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / ac[0] if ac[0] > 0 else np.zeros(n)


def effective_sample_size(chains) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    m, n = x.shape
    if np.all(x.var(axis=1) == 0):
        return float(m * n)
    acov = np.array([_autocorr(c) * c.var() for c in x])
    w = x.var(axis=1, ddof=1).mean()
    var_plus = (n - 1) / n * w + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative and forced monotone
    pairs = rho[:-1:2] + rho[1::2]
    total = 0.0
    prev = np.inf
    for p in pairs:
        if p < 0:
            break
        p = min(p, prev)
        total += p
        prev = p
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / np.log10(m * n + 10)))


def mcse_mean(chains) -> float:
    x = np.asarray(chains, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(effective_sample_size(x)))


def mcse_sd(chains) -> float:
    """MCSE of the standard deviation via the delta method on the second moment."""
    x = np.asarray(chains, dtype=float)
    mu = x.mean()
    sd = x.std(ddof=1)
    sq = (x - mu) ** 2
    se_var = sq.std(ddof=1) / np.sqrt(effective_sample_size(sq))
    return float(se_var / (2 * sd))
