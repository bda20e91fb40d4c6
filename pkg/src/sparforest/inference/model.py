"""Step-2 model: Poisson log-linear risk with BYM2 effects.

The log relative risk for unit k is ``beta0 + g_k + m_k + phi_k``. The
confounder term ``m`` is either a latent Gaussian around fixed forest
estimates (``oob_offset``) or a linear predictor ``z @ delta`` (``linear``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit, gammaln

from ..areal import Dataset
from ..erf import ErfSpec, build_rw2_basis, rw2_prior_basis
from ..spatial import Bym2Hyperparams, ScaledIcarPrecision

CONFOUNDER_MODES = ("oob_offset", "linear")
LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class ModelSpec:
    erf: ErfSpec
    precision: ScaledIcarPrecision
    mhat: np.ndarray | None = None
    sigma2_m: float = 0.0
    hyper: Bym2Hyperparams = field(default_factory=Bym2Hyperparams)
    confounder_mode: str = "oob_offset"
    beta0_prior_variance: float = 1e5
    delta_prior_variance: float = 1e5

    def __post_init__(self):
        if self.confounder_mode not in CONFOUNDER_MODES:
            raise ValueError(f"confounder_mode must be one of {CONFOUNDER_MODES}")
        if not self.sigma2_m >= 0:
            raise ValueError("sigma2_m must be nonnegative")
        k = self.precision.n_units
        if self.mhat is None:
            object.__setattr__(self, "mhat", np.zeros(k))
        mhat = np.asarray(self.mhat, dtype=float)
        if mhat.shape != (k,):
            raise ValueError("mhat must have one entry per unit")
        object.__setattr__(self, "mhat", mhat)
        if self.confounder_mode == "linear" and self.sigma2_m != 0:
            raise ValueError("sigma2_m only applies in oob_offset mode")
        h = self.hyper
        if h.fixed and h.rho == 1.0 and self.sigma2_m == 0:
            raise ValueError("rho fixed at 1 with sigma2_m = 0 leaves no iid variance")

    @property
    def n_units(self) -> int:
        return self.precision.n_units

    @property
    def latent_m(self) -> bool:
        return self.confounder_mode == "oob_offset" and self.sigma2_m > 0

    @property
    def latent_x(self) -> bool:
        return self.erf.kind == "berkson_linear" and self.erf.sigma2_x > 0

    @property
    def rw2(self) -> bool:
        return self.erf.kind == "pspline_rw2"


@dataclass(frozen=True)
class Design:
    """Data-dependent pieces of the model that do not change during sampling."""

    y: np.ndarray
    e: np.ndarray
    log_e: np.ndarray
    lgam: np.ndarray
    x: np.ndarray
    z: np.ndarray
    bins: np.ndarray | None = None
    bin_edges: np.ndarray | None = None
    rw2_vectors: np.ndarray | None = None
    rw2_eigen: np.ndarray | None = None
    rw2_linear: np.ndarray | None = None


def make_design(data: Dataset, spec: ModelSpec) -> Design:
    x = np.asarray(data.exposure(spec.erf.exposure_index), dtype=float)
    z = data.confounders if spec.confounder_mode == "linear" else np.zeros((data.n_units, 0))
    kw = {}
    if spec.rw2:
        basis = build_rw2_basis(x, spec.erf.n_bins)
        vec, eig, lin = rw2_prior_basis(spec.erf.n_bins)
        kw = dict(bins=basis.bins, bin_edges=basis.edges, rw2_vectors=vec,
                  rw2_eigen=eig, rw2_linear=lin)
    y = data.y.astype(float)
    return Design(y, data.e, np.log(data.e), gammaln(y + 1), x, np.asarray(z, dtype=float), **kw)


@dataclass
class ModelState:
    """A point in parameter space on unconstrained scales.

    ``erf`` is the slope (length 1) or the vector of RW2 bin values. ``m``
    and ``x`` are only used when the corresponding latent layer is active.
    """

    beta0: float
    erf: np.ndarray
    delta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    log_tau_phi: float
    logit_rho: float
    log_tau_f: float = 0.0
    m: np.ndarray | None = None
    x: np.ndarray | None = None

    @property
    def tau_phi(self) -> float:
        return float(np.exp(self.log_tau_phi))

    @property
    def rho(self) -> float:
        return float(expit(self.logit_rho))

    def copy(self) -> "ModelState":
        return replace(self, **{f.name: np.array(getattr(self, f.name), copy=True)
                                for f in fields(self)
                                if isinstance(getattr(self, f.name), np.ndarray)})


def _layout(spec: ModelSpec, design: Design):
    k = spec.n_units
    n_erf = spec.erf.n_bins if spec.rw2 else 1
    parts = [("beta0", 1), ("erf", n_erf), ("delta", design.z.shape[1]), ("u", k), ("v", k)]
    if spec.latent_m:
        parts.append(("m", k))
    if spec.latent_x:
        parts.append(("x", k))
    parts += [("log_tau_phi", 1), ("logit_rho", 1)]
    if spec.rw2:
        parts.append(("log_tau_f", 1))
    return parts


def flatten(state: ModelState, spec: ModelSpec, design: Design) -> np.ndarray:
    return np.concatenate([np.atleast_1d(np.asarray(getattr(state, name), dtype=float))
                           for name, _ in _layout(spec, design)])


def unflatten(theta, spec: ModelSpec, design: Design) -> ModelState:
    theta = np.asarray(theta, dtype=float)
    vals = {}
    i = 0
    for name, n in _layout(spec, design):
        chunk = theta[i:i + n]
        vals[name] = float(chunk[0]) if name in ("beta0", "log_tau_phi", "logit_rho",
                                                  "log_tau_f") else chunk.copy()
        i += n
    if i != theta.size:
        raise ValueError("parameter vector has the wrong length")
    return ModelState(**vals)


def initial_state(spec: ModelSpec, design: Design) -> ModelState:
    k = spec.n_units
    n_erf = spec.erf.n_bins if spec.rw2 else 1
    base = np.log((design.y.sum() + 0.5) / (design.e * np.exp(spec.mhat)).sum())
    return ModelState(
        beta0=float(base), erf=np.zeros(n_erf), delta=np.zeros(design.z.shape[1]),
        u=np.zeros(k), v=np.zeros(k), log_tau_phi=float(np.log(spec.hyper.tau_phi)),
        logit_rho=float(np.log(spec.hyper.rho / (1 - spec.hyper.rho)))
        if 0 < spec.hyper.rho < 1 else 0.0,
        m=spec.mhat.copy() if spec.latent_m else None,
        x=design.x.copy() if spec.latent_x else None)


def erf_values(state: ModelState, spec: ModelSpec, design: Design) -> np.ndarray:
    """g evaluated at each unit."""
    if spec.rw2:
        return np.asarray(state.erf)[design.bins]
    x = state.x if spec.latent_x else design.x
    return float(np.asarray(state.erf)[0]) * x


def phi_values(state: ModelState) -> np.ndarray:
    rho = state.rho
    return (np.sqrt(1 - rho) * state.v + np.sqrt(rho) * state.u) / np.sqrt(state.tau_phi)


def confounder_values(state: ModelState, spec: ModelSpec, design: Design) -> np.ndarray:
    if spec.confounder_mode == "linear":
        return design.z @ state.delta if design.z.shape[1] else np.zeros(spec.n_units)
    return state.m if spec.latent_m else spec.mhat


def linear_predictor(state: ModelState, spec: ModelSpec, design: Design) -> np.ndarray:
    return (state.beta0 + erf_values(state, spec, design)
            + confounder_values(state, spec, design) + phi_values(state))


def poisson_loglik(eta, design: Design) -> np.ndarray:
    """Per-unit Poisson log-likelihood with ``mu = e * exp(eta)``."""
    eta = np.asarray(eta, dtype=float)
    return design.y * (design.log_e + eta) - design.e * np.exp(eta) - design.lgam


def log_prior_log_tau(ell: float, tau0: float) -> float:
    """Log density of ``log tau`` when ``tau ** -0.5`` is half-normal with precision tau0."""
    return 0.5 * np.log(tau0 / (2 * np.pi)) - 0.5 * tau0 * np.exp(-ell) - 0.5 * ell


def _d_log_prior_log_tau(ell: float, tau0: float) -> float:
    return 0.5 * tau0 * np.exp(-ell) - 0.5


def _rw2_coords(f, design: Design):
    return design.rw2_vectors.T @ f


def log_posterior(state: ModelState, data_or_design, spec: ModelSpec) -> float:
    """Unnormalised log posterior density, ``-inf`` outside the support."""
    design = (data_or_design if isinstance(data_or_design, Design)
              else make_design(data_or_design, spec))
    try:
        with np.errstate(all="ignore"):
            val = _log_posterior(state, design, spec)
    except (FloatingPointError, OverflowError, ValueError):
        return -np.inf
    return float(val) if np.isfinite(val) else -np.inf


def _log_posterior(state: ModelState, design: Design, spec: ModelSpec) -> float:
    scalars = [state.beta0, state.log_tau_phi, state.logit_rho, state.log_tau_f]
    arrays = [state.erf, state.delta, state.u, state.v]
    if not all(np.isfinite(scalars)) or not all(np.all(np.isfinite(a)) for a in arrays):
        return -np.inf
    h = spec.hyper
    prec = spec.precision
    eta = linear_predictor(state, spec, design)
    lp = poisson_loglik(eta, design).sum()
    lp += -0.5 * state.beta0 ** 2 / spec.beta0_prior_variance \
        - 0.5 * (LOG_2PI + np.log(spec.beta0_prior_variance))
    pa = spec.erf.prior_precision_alpha
    if spec.rw2:
        c = _rw2_coords(state.erf, design)
        lam = design.rw2_eigen
        lin = design.rw2_linear
        tau_f = np.exp(state.log_tau_f)
        lp += -0.5 * (tau_f * np.sum(lam[~lin] * c[~lin] ** 2) + pa * np.sum(c[lin] ** 2))
        lp += 0.5 * ((~lin).sum() * state.log_tau_f + np.log(lam[~lin]).sum() + np.log(pa)) \
            - 0.5 * c.size * LOG_2PI
        lp += log_prior_log_tau(state.log_tau_f, h.tau0)
    else:
        a = float(state.erf[0])
        lp += -0.5 * pa * a * a + 0.5 * (np.log(pa) - LOG_2PI)
    if design.z.shape[1]:
        dv = spec.delta_prior_variance
        lp += np.sum(-0.5 * state.delta ** 2 / dv) - 0.5 * state.delta.size * (LOG_2PI + np.log(dv))
    lp += -0.5 * np.sum(state.v ** 2) - 0.5 * state.v.size * LOG_2PI
    qu = prec.q_matrix @ state.u
    lp += -0.5 * state.u @ qu + 0.5 * prec.log_det_plus() - 0.5 * prec.rank * LOG_2PI
    lp += log_prior_log_tau(state.log_tau_phi, h.tau0)
    mu_r, sd_r = h.pc_rho_params
    lp += -0.5 * ((state.logit_rho - mu_r) / sd_r) ** 2 - np.log(sd_r) - 0.5 * LOG_2PI
    if spec.latent_m:
        r = state.m - spec.mhat
        lp += -0.5 * np.sum(r * r) / spec.sigma2_m - 0.5 * r.size * (LOG_2PI + np.log(spec.sigma2_m))
    if spec.latent_x:
        s2 = spec.erf.sigma2_x
        r = state.x - design.x
        lp += -0.5 * np.sum(r * r) / s2 - 0.5 * r.size * (LOG_2PI + np.log(s2))
    return lp


def grad_log_posterior(state: ModelState, design: Design, spec: ModelSpec) -> ModelState:
    """Gradient of :func:`log_posterior`, returned in the shape of a state."""
    h = spec.hyper
    eta = linear_predictor(state, spec, design)
    resid = design.y - design.e * np.exp(eta)
    tau, rho = state.tau_phi, state.rho
    pa = spec.erf.prior_precision_alpha
    g = ModelState(beta0=0.0, erf=np.zeros_like(state.erf), delta=np.zeros_like(state.delta),
                   u=np.zeros_like(state.u), v=np.zeros_like(state.v),
                   log_tau_phi=0.0, logit_rho=0.0, log_tau_f=0.0)
    g.beta0 = float(resid.sum() - state.beta0 / spec.beta0_prior_variance)
    if spec.rw2:
        k_bins = state.erf.size
        c = _rw2_coords(state.erf, design)
        lam = design.rw2_eigen
        lin = design.rw2_linear
        tau_f = np.exp(state.log_tau_f)
        wts = np.where(lin, pa, tau_f * lam)
        g.erf = np.bincount(design.bins, weights=resid, minlength=k_bins) \
            - design.rw2_vectors @ (wts * c)
        g.log_tau_f = float(-0.5 * tau_f * np.sum(lam[~lin] * c[~lin] ** 2) + 0.5 * (~lin).sum()
                            + _d_log_prior_log_tau(state.log_tau_f, h.tau0))
    else:
        a = float(state.erf[0])
        x = state.x if spec.latent_x else design.x
        g.erf = np.array([resid @ x - pa * a])
        if spec.latent_x:
            g.x = resid * a - (state.x - design.x) / spec.erf.sigma2_x
    if design.z.shape[1]:
        g.delta = design.z.T @ resid - state.delta / spec.delta_prior_variance
    g.v = resid * np.sqrt((1 - rho) / tau) - state.v
    g.u = resid * np.sqrt(rho / tau) - spec.precision.q_matrix @ state.u
    if spec.latent_m:
        g.m = resid - (state.m - spec.mhat) / spec.sigma2_m
    phi = phi_values(state)
    g.log_tau_phi = float(-0.5 * resid @ phi + _d_log_prior_log_tau(state.log_tau_phi, h.tau0))
    dphi = 0.5 * ((1 - rho) * np.sqrt(rho) * state.u - rho * np.sqrt(1 - rho) * state.v) / np.sqrt(tau)
    mu_r, sd_r = h.pc_rho_params
    g.logit_rho = float(resid @ dphi - (state.logit_rho - mu_r) / sd_r ** 2)
    return g
