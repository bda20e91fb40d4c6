"""Exposure-response functions and relative-risk summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ERF_KINDS = ("linear", "pspline_rw2", "berkson_linear")


@dataclass(frozen=True)
class ErfSpec:
    """Which ERF to fit and its settings.

    ``prior_precision_alpha`` is the precision of the normal prior on the
    slope (or, for the RW2 variant, on the unpenalised linear direction).
    """

    kind: str = "linear"
    exposure_index: int = 0
    n_bins: int = 50
    sigma2_x: float = 0.0
    prior_precision_alpha: float = 1e-5

    def __post_init__(self):
        if self.kind not in ERF_KINDS:
            raise ValueError(f"unknown ERF kind {self.kind!r}; choose from {ERF_KINDS}")
        if self.kind == "pspline_rw2" and self.n_bins < 4:
            raise ValueError("an RW2 ERF needs at least 4 bins")
        if not self.sigma2_x >= 0:
            raise ValueError("sigma2_x must be nonnegative")
        if not self.prior_precision_alpha > 0:
            raise ValueError("prior_precision_alpha must be positive")

    @property
    def is_linear(self) -> bool:
        """True when the ERF reduces to a slope on the observed exposure."""
        return self.kind == "linear" or (self.kind == "berkson_linear" and self.sigma2_x == 0)


def eval_linear_erf(alpha: float, x) -> np.ndarray:
    return alpha * np.asarray(x, dtype=float)


def second_difference(n: int) -> np.ndarray:
    d = np.zeros((n - 2, n))
    i = np.arange(n - 2)
    d[i, i] = 1.0
    d[i, i + 1] = -2.0
    d[i, i + 2] = 1.0
    return d


@dataclass(frozen=True)
class Rw2Basis:
    bins: np.ndarray
    penalty: np.ndarray
    edges: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.penalty.shape[0]

    def assign(self, x) -> np.ndarray:
        return bin_index(x, self.edges)


def bin_index(x, edges) -> np.ndarray:
    """Half-open equal-width bins; the maximum closes into the last bin."""
    x = np.asarray(x, dtype=float)
    n = edges.size - 1
    idx = np.searchsorted(edges, x, side="right") - 1
    return np.clip(idx, 0, n - 1)


def build_rw2_basis(x, n_bins: int = 50) -> Rw2Basis:
    if n_bins < 4:
        raise ValueError("an RW2 basis needs at least 4 bins")
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise ValueError("exposure is constant; an RW2 ERF is not identifiable")
    edges = np.linspace(lo, hi, n_bins + 1)
    d = second_difference(n_bins)
    return Rw2Basis(bin_index(x, edges), d.T @ d, edges)


def rw2_prior_basis(n_bins: int):
    """Eigenbasis of the RW2 penalty on the sum-to-zero subspace.

    Returns ``(vectors, eigenvalues, linear)`` where ``vectors`` has
    ``n_bins - 1`` orthonormal columns orthogonal to the constant,
    ``eigenvalues`` are the penalty eigenvalues along them and ``linear``
    flags the one column spanning the penalty-free linear trend.
    """
    d = second_difference(n_bins)
    pen = d.T @ d
    j = np.arange(n_bins, dtype=float)
    one = np.ones(n_bins) / np.sqrt(n_bins)
    lin = j - j.mean()
    lin /= np.linalg.norm(lin)
    # penalty restricted to the complement of span{1, lin}
    proj = np.eye(n_bins) - np.outer(one, one) - np.outer(lin, lin)
    lam, vec = np.linalg.eigh(proj @ pen @ proj)
    vec = vec[:, 2:]
    lam = lam[2:]
    vectors = np.column_stack([lin, vec])
    eig = np.concatenate([[0.0], lam])
    linear = np.zeros(n_bins - 1, dtype=bool)
    linear[0] = True
    return vectors, eig, linear


@dataclass(frozen=True)
class BerksonContract:
    """Latent exposure ``x ~ N(x_tilde, sigma2_x)`` entering as ``alpha * x``."""

    x_tilde: np.ndarray
    sigma2_x: float

    @property
    def degenerate(self) -> bool:
        return self.sigma2_x == 0

    def log_density(self, x) -> float:
        if self.degenerate:
            return 0.0 if np.array_equal(x, self.x_tilde) else -np.inf
        r = np.asarray(x) - self.x_tilde
        return float(-0.5 * np.sum(r * r) / self.sigma2_x
                     - 0.5 * r.size * np.log(2 * np.pi * self.sigma2_x))


def berkson_linear_contract(alpha, x_tilde, sigma2_x: float) -> BerksonContract:
    del alpha  # the slope is a model parameter; the contract only fixes the latent layer
    if not sigma2_x >= 0:
        raise ValueError("sigma2_x must be nonnegative")
    return BerksonContract(np.asarray(x_tilde, dtype=float), float(sigma2_x))


@dataclass(frozen=True)
class ErfPosterior:
    grid: np.ndarray
    mean: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    samples: np.ndarray

    @classmethod
    def from_samples(cls, grid, samples) -> "ErfPosterior":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        mean = samples.mean(axis=0)
        lo, hi = np.percentile(samples, [2.5, 97.5], axis=0)
        # percentiles can straddle the mean only through rounding
        return cls(np.asarray(grid, dtype=float), mean,
                   np.minimum(lo, mean), np.maximum(hi, mean), samples)

    def relative_to_min(self) -> "ErfPosterior":
        """Curve samples shifted so the ERF is zero at the smallest grid value."""
        return type(self).from_samples(self.grid, self.samples - self.samples[:, :1])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "mean", "lower95", "upper95"])
            for row in zip(self.grid, self.mean, self.lower95, self.upper95):
                w.writerow([repr(float(v)) for v in row])


def erf_grid(x, n: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.linspace(x.min(), x.max(), n)


@dataclass(frozen=True)
class RRSummary:
    rr_mean: np.ndarray | float
    rr_lower95: np.ndarray | float
    rr_upper95: np.ndarray | float


def _summ(rr):
    rr = np.asarray(rr, dtype=float)
    lo, hi = np.percentile(rr, [2.5, 97.5], axis=0)
    mean = rr.mean(axis=0)
    return np.minimum(lo, mean), mean, np.maximum(hi, mean)


def rr_report(source, delta: float | None = None) -> RRSummary:
    """Relative-risk summary.

    With slope samples and ``delta > 0``, per-sample RR is
    ``exp(alpha * delta)``. With an :class:`ErfPosterior`, the curve
    ``exp(g(x) - g(x_min))`` is summarised pointwise on its grid.
    """
    if isinstance(source, ErfPosterior):
        s = source.samples
        if s.size == 0:
            raise ValueError("no posterior samples")
        lo, mean, hi = _summ(np.exp(s - s[:, :1]))
        return RRSummary(mean, lo, hi)
    alpha = np.asarray(source, dtype=float).ravel()
    if alpha.size == 0:
        raise ValueError("no posterior samples")
    if delta is None or not delta > 0:
        raise ValueError("an increment report needs delta > 0")
    lo, mean, hi = _summ(np.exp(alpha * delta))
    return RRSummary(float(mean), float(lo), float(hi))
