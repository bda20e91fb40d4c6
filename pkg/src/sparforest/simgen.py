"""Synthetic areal count data with known exposure-response truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular, splu
from scipy.spatial.distance import pdist, squareform

from .areal import ArealMap, Dataset, InputError
from .spatial import leroux_precision

PREVALENCES = ("rare", "common")
ERF_SHAPES = ("linear", "sigmoidal")
CONFOUNDING = ("good", "poor")
CONFOUNDER_FORMS = ("nonlinear", "linear")
RESIDUAL_SHARE = {"good": 0.05, "poor": 0.40}
EXPECTED_RANGE = {"rare": (10.0, 25.0), "common": (100.0, 200.0)}
SPHERICAL_RANGE = 5.0
EXPOSURE_CORRELATION = 0.75


@dataclass(frozen=True)
class SimScenario:
    """One cell of the simulation design.

    The linear confounder form exists only as the ninth scenario, which is
    common prevalence, linear ERF and good confounding control.
    """

    prevalence: str = "common"
    erf_shape: str = "linear"
    confounding: str = "good"
    confounder_form: str = "nonlinear"
    alpha: float = 0.2
    leroux_rho: float = 0.95
    seed: int = 0

    def __post_init__(self):
        for value, allowed, label in ((self.prevalence, PREVALENCES, "prevalence"),
                                      (self.erf_shape, ERF_SHAPES, "erf_shape"),
                                      (self.confounding, CONFOUNDING, "confounding"),
                                      (self.confounder_form, CONFOUNDER_FORMS, "confounder_form")):
            if value not in allowed:
                raise ValueError(f"{label} must be one of {allowed}, got {value!r}")
        if self.confounder_form == "linear" and (
                self.prevalence, self.erf_shape, self.confounding) != ("common", "linear", "good"):
            raise ValueError("the linear confounder form is only defined for "
                             "common prevalence, linear ERF and good confounding")
        if not 0.0 <= self.leroux_rho < 1.0:
            raise ValueError("leroux_rho must lie in [0, 1)")

    @property
    def name(self) -> str:
        base = f"{self.prevalence}-{self.erf_shape}-{self.confounding}"
        return base + "-linearconf" if self.confounder_form == "linear" else base

    @property
    def number(self) -> int:
        """Position 1-8 in the factorial design, 9 for the linear confounder form."""
        if self.confounder_form == "linear":
            return 9
        return 1 + (PREVALENCES.index(self.prevalence) * 4 + CONFOUNDING.index(self.confounding) * 2
                    + ERF_SHAPES.index(self.erf_shape))

    @property
    def residual_share(self) -> float:
        return RESIDUAL_SHARE[self.confounding]


def _all_scenarios() -> dict[str, SimScenario]:
    out = {}
    for prev in PREVALENCES:
        for conf in CONFOUNDING:
            for shape in ERF_SHAPES:
                s = SimScenario(prev, shape, conf)
                out[s.name] = s
    s9 = SimScenario("common", "linear", "good", "linear")
    out[s9.name] = s9
    return dict(sorted(out.items(), key=lambda kv: kv[1].number))


SCENARIOS = _all_scenarios()


def scenario(name: str, **overrides) -> SimScenario:
    if name not in SCENARIOS:
        raise InputError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIOS)}")
    return replace(SCENARIOS[name], **overrides)


# ---------------------------------------------------------------------------
# kernels and fields


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = x.min(axis=0), x.max(axis=0)
    return (x - lo) / (hi - lo)


def exponential_range(d_star: float, corr: float = EXPOSURE_CORRELATION) -> float:
    """Range ``r`` with ``exp(-d_star / r) = corr``."""
    return -d_star / np.log(corr)


def spherical_correlation(d, radius: float = SPHERICAL_RANGE) -> np.ndarray:
    h = np.minimum(np.asarray(d, dtype=float) / radius, 1.0)
    return 1.0 - 1.5 * h + 0.5 * h ** 3


def _centroids(amap: ArealMap) -> np.ndarray:
    if amap.centroids is None:
        raise InputError("simulation needs centroids")
    if amap.n_units < 2:
        raise InputError("simulation needs at least two units")
    return amap.centroids


def _mvn(cov, rng, n=1):
    chol = np.linalg.cholesky(cov + 1e-10 * np.eye(cov.shape[0]))
    return chol @ rng.standard_normal((cov.shape[0], n))


def gen_exposures(amap: ArealMap, seed, rescale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """An independent exposure and a spatially smooth one, both on [0, 1].

    ``rescale=False`` returns the underlying Gaussian draws before the
    min-max map, which is where the exponential correlation holds.
    """
    c = _centroids(amap)
    rng = np.random.default_rng(seed)
    d = pdist(c)
    r = exponential_range(float(np.percentile(d, 5)))
    x1 = rng.standard_normal(amap.n_units)
    x2 = _mvn(np.exp(-squareform(d) / r), rng)[:, 0]
    if not rescale:
        return x1, x2
    return minmax(x1), minmax(x2)


def gen_confounders(amap: ArealMap, seed) -> np.ndarray:
    """Four independent and four spherically correlated columns on [0, 1]."""
    c = _centroids(amap)
    rng = np.random.default_rng(seed)
    k = amap.n_units
    indep = rng.standard_normal((k, 4))
    smooth = _mvn(spherical_correlation(squareform(pdist(c))), rng, 4)
    return minmax(np.hstack([indep, smooth]))


def m_true(z, form: str = "nonlinear") -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if form == "nonlinear":
        return (3.0 / (1.0 + np.exp(6.0 - 12.0 * z[:, 0])) + 2.0 * (z[:, 2] * z[:, 5] - 0.4) ** 2
                + np.cos(2.0 * np.pi * z[:, 6]) + z[:, 7])
    if form == "linear":
        return 0.5 * z[:, 0] - z[:, 2] + 2.0 * z[:, 6] - 0.1 * z[:, 7]
    raise ValueError(f"form must be one of {CONFOUNDER_FORMS}")


def g_true(x, shape: str = "linear", alpha: float = 0.2) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if shape == "linear":
        return alpha * x
    if shape == "sigmoidal":
        return alpha / (1.0 + np.exp(6.0 - 12.0 * x))
    raise ValueError(f"shape must be one of {ERF_SHAPES}")


def gen_residual_field(amap: ArealMap, leroux_rho: float = 0.95, seed=0,
                       n: int | None = None) -> np.ndarray:
    """Zero-mean Gaussian draw(s) with unit-scale Leroux CAR precision.

    Uses a sparse LDL' factor of the precision (no pivoting, which is
    stable for a symmetric positive definite matrix). With ``n`` given the
    result has shape ``(n, K)``.
    """
    if not 0.0 <= leroux_rho < 1.0:
        raise ValueError("leroux_rho must lie in [0, 1)")
    q = leroux_precision(amap, leroux_rho)
    k = amap.n_units
    lu = splu(q, permc_spec="NATURAL", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    if not (np.array_equal(lu.perm_r, np.arange(k)) and np.array_equal(lu.perm_c, np.arange(k))):
        raise FloatingPointError("unexpected pivoting while factorising the precision")
    diag = lu.U.diagonal()
    if np.any(~(diag > 0)):
        raise FloatingPointError("Leroux precision is not positive definite")
    rng = np.random.default_rng(seed)
    m = 1 if n is None else n
    rhs = rng.standard_normal((k, m)) / np.sqrt(diag)[:, None]
    draws = spsolve_triangular(sp.csr_matrix(lu.L.T), rhs, lower=False, unit_diagonal=True)
    draws = np.asarray(draws).reshape(k, m).T
    return draws[0] if n is None else draws


# ---------------------------------------------------------------------------
# full replicates


@dataclass(frozen=True)
class SimulatedDataset:
    dataset: Dataset
    g_true: np.ndarray
    m_true: np.ndarray
    phi_true: np.ndarray
    theta_true: np.ndarray
    intercept: float
    scenario: SimScenario

    @property
    def target_exposure(self) -> int:
        """Column of the spatially smooth exposure, the study's target."""
        return 1

    def log_risk(self) -> np.ndarray:
        return self.intercept + (self.g_true.sum(axis=1) + self.m_true + self.phi_true)

    def write(self, data_path, truth_path) -> None:
        from .areal import write_dataset
        write_dataset(data_path, self.dataset)
        with Path(truth_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "g_true_x1", "g_true_x2", "m_true", "phi_true", "theta_true"])
            for k, uid in enumerate(self.dataset.unit_ids):
                w.writerow([uid] + [repr(float(v)) for v in
                                    (*self.g_true[k], self.m_true[k], self.phi_true[k],
                                     self.theta_true[k])])


def generate(scen: SimScenario, amap: ArealMap) -> SimulatedDataset:
    """One replicate; every random component has its own child seed."""
    seeds = np.random.SeedSequence(scen.seed).spawn(5)
    x1, x2 = gen_exposures(amap, seeds[0])
    z = gen_confounders(amap, seeds[1])
    m = m_true(z, scen.confounder_form)
    field = gen_residual_field(amap, scen.leroux_rho, seeds[2])
    share = scen.residual_share
    # scale phi so var(phi) / (var(m) + var(phi)) hits the share exactly
    phi = field - field.mean()
    phi *= np.sqrt(share / (1.0 - share) * m.var() / phi.var())
    g = np.column_stack([g_true(x1, scen.erf_shape, scen.alpha),
                         g_true(x2, scen.erf_shape, scen.alpha)])
    rest = g.sum(axis=1) + m + phi
    intercept = float(-np.log(np.mean(np.exp(rest))))
    log_theta = intercept + rest
    theta = np.exp(log_theta)
    rng_e = np.random.default_rng(seeds[3])
    e = rng_e.uniform(*EXPECTED_RANGE[scen.prevalence], size=amap.n_units)
    y = np.random.default_rng(seeds[4]).poisson(e * theta)
    data = Dataset(y=y, e=e, exposures=np.column_stack([x1, x2]), confounders=z,
                   exposure_names=("x1", "x2"),
                   confounder_names=tuple(f"z{i}" for i in range(1, 9)),
                   unit_ids=amap.unit_ids)
    return SimulatedDataset(data, g, m, phi, theta, intercept, scen)
