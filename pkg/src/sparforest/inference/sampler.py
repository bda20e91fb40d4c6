"""Metropolis-within-Gibbs sampler for the Step-2 model.

The sampler works with the linear predictor ``eta`` as an explicit latent
variable. Given the hyperparameters, all unit-level independent Gaussian
terms (the unstructured BYM2 part and the confounder measurement error)
collapse into one residual ``w = eta - mean`` with variance

    s2 = sigma2_m + (1 - rho) / tau_phi,

so that conditional on ``eta`` the intercept, ERF coefficients, linear
confounder coefficients and the spatial coordinates ``c`` (with
``u = basis @ c``) form one Gaussian block. Its precision is diagonal in
the spatial coordinates plus a small dense corner, which is factorised
through its Schur complement. Each sweep

1. refreshes the latent exposures (Berkson ERF) from their Gaussian
   full conditional,
2. updates ``log tau_phi``, ``logit rho`` (and ``log tau_f`` for the RW2
   ERF) on their density with the Gaussian block integrated out: first by
   one joint independence Metropolis step whose proposal comes from a
   Laplace approximation of their marginal posterior (skipped for maps
   above ``LAPLACE_CAP``), then by one adaptive random-walk step per
   parameter, with adaptation frozen after burn-in. The random-walk steps
   keep the chain mixing when the posterior has tails the Laplace
   proposal misses,
3. draws the Gaussian block exactly from its conditional, and
4. updates each ``eta_k`` by an independence Metropolis step whose
   Student-t proposal is centred on a Newton-refined Laplace
   approximation built from the prior mean only.

The split of ``w`` into measurement error and unstructured effect is drawn
from its exact conditional whenever a draw is retained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import solve_triangular
from scipy.special import expit

from ..areal import Dataset
from .model import Design, ModelSpec, log_prior_log_tau, make_design
from .mcdiag import split_rhat

logger = logging.getLogger(__name__)

T_DOF = 5.0
ADAPT_EVERY = 50
TARGET_ACCEPT = 0.44
LAPLACE_CAP = 1500
PROPOSAL_INFLATE = 1.2


@dataclass(frozen=True)
class SamplerConfig:
    """Run-length settings.

    ``n_iter`` post-burn-in sweeps per chain; ``n_keep`` full vector draws
    are retained over all chains and ``n_samples`` of those are exported
    for the next forest step. ``thin`` thins the scalar traces.
    """

    n_samples: int = 100
    n_iter: int = 5000
    burn_in: int = 5000
    n_chains: int = 4
    thin: int = 1
    n_keep: int = 1000
    seed: int = 0
    n_jobs: int = 1
    rhat_threshold: float = 1.1

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("invalid sampler run length")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.n_samples > self.total_keep:
            raise ValueError("n_samples cannot exceed the number of retained draws")

    @property
    def keep_per_chain(self) -> int:
        return max(1, min(self.n_iter, -(-max(self.n_keep, self.n_samples) // self.n_chains)))

    @property
    def total_keep(self) -> int:
        return self.keep_per_chain * self.n_chains


@dataclass
class PosteriorSamples:
    """Retained joint draws plus full scalar traces and diagnostics.

    Vector fields have one row per retained draw. ``traces`` maps scalar
    names to ``(n_chains, n_draws)`` arrays; ``erf_trace`` holds every
    post-burn-in draw of the ERF parameters, shape ``(n_chains, n_draws,
    n_erf)``. ``erf_mean_rb`` is the Rao-Blackwellised posterior mean of the
    ERF parameters: the average over all post-burn-in sweeps of their
    Gaussian conditional mean.
    """

    beta0: np.ndarray
    erf_params: np.ndarray
    delta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    tau_phi: np.ndarray
    rho: np.ndarray
    g: np.ndarray
    eta: np.ndarray
    m: np.ndarray
    tau_f: np.ndarray | None = None
    latent_m: np.ndarray | None = None
    latent_x: np.ndarray | None = None
    traces: dict = field(default_factory=dict)
    erf_trace: np.ndarray | None = None
    erf_mean_rb: np.ndarray | None = None
    rhat: dict = field(default_factory=dict)
    acceptance: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.beta0.size

    @property
    def g_plus_phi(self) -> np.ndarray:
        return self.g + self.phi

    @property
    def converged(self) -> bool:
        return not self.warnings

    def subset(self, idx) -> "PosteriorSamples":
        idx = np.asarray(idx)
        pick = {}
        for name in ("beta0", "erf_params", "delta", "u", "v", "phi", "tau_phi", "rho",
                     "g", "eta", "m", "tau_f", "latent_m", "latent_x"):
            val = getattr(self, name)
            pick[name] = None if val is None else val[idx]
        return PosteriorSamples(**pick, traces=self.traces, erf_trace=self.erf_trace,
                                erf_mean_rb=self.erf_mean_rb, rhat=self.rhat,
                                acceptance=self.acceptance, warnings=list(self.warnings))

    def thinned(self, q: int) -> "PosteriorSamples":
        """``q`` draws evenly spaced through the retained ones."""
        if not 1 <= q <= self.n_samples:
            raise ValueError(f"cannot thin {self.n_samples} draws to {q}")
        idx = np.floor(np.arange(q) * (self.n_samples / q)).astype(int)
        return self.subset(idx)

    def all_erf_draws(self) -> np.ndarray:
        """Every post-burn-in ERF parameter draw, chains stacked."""
        if self.erf_trace is None:
            return self.erf_params
        return self.erf_trace.reshape(-1, self.erf_trace.shape[-1])


class _Block:
    """Fixed-effect design and prior for the dense corner of the Gaussian block."""

    def __init__(self, spec: ModelSpec, design: Design):
        k = spec.n_units
        cols = [np.ones((k, 1))]
        names = ["beta0"]
        pa = spec.erf.prior_precision_alpha
        if spec.rw2:
            onehot = np.zeros((k, spec.erf.n_bins))
            onehot[np.arange(k), design.bins] = 1.0
            cols.append(onehot @ design.rw2_vectors)
            names += [f"c{i}" for i in range(design.rw2_vectors.shape[1])]
        else:
            cols.append(design.x[:, None].copy())
            names.append("alpha")
        self.erf_slice = slice(1, 1 + cols[1].shape[1])
        if design.z.shape[1]:
            cols.append(design.z)
        self.delta_slice = slice(self.erf_slice.stop, self.erf_slice.stop + design.z.shape[1])
        self.F = np.hstack(cols)
        self.d = self.F.shape[1]
        p0 = np.full(self.d, 1.0 / spec.delta_prior_variance)
        p0[0] = 1.0 / spec.beta0_prior_variance
        self.rw2 = spec.rw2
        if spec.rw2:
            self.rw2_lam = design.rw2_eigen
            self.rw2_lin = design.rw2_linear
            p0[self.erf_slice] = np.where(self.rw2_lin, pa, 1.0)
        else:
            p0[self.erf_slice] = pa
        self.p0_base = p0

    def prior_precision(self, tau_f: float) -> np.ndarray:
        if not self.rw2:
            return self.p0_base
        p0 = self.p0_base.copy()
        p0[self.erf_slice] = np.where(self.rw2_lin, self.p0_base[self.erf_slice],
                                      tau_f * self.rw2_lam)
        return p0


@dataclass
class _Hyper:
    tau: float
    rho: float
    tau_f: float

    def unconstrained(self) -> np.ndarray:
        return np.array([np.log(self.tau), np.log(self.rho) - np.log1p(-self.rho),
                         np.log(self.tau_f)])

    @classmethod
    def from_unconstrained(cls, t) -> "_Hyper":
        return cls(float(np.exp(t[0])), float(expit(t[1])), float(np.exp(t[2])))


def _log_prior_hyper(spec: ModelSpec, t) -> float:
    h = spec.hyper
    mu_r, sd_r = h.pc_rho_params
    lp = log_prior_log_tau(t[0], h.tau0) - 0.5 * ((t[1] - mu_r) / sd_r) ** 2
    if spec.rw2:
        lp += log_prior_log_tau(t[2], h.tau0)
    return float(lp)


@dataclass(frozen=True)
class HyperProposal:
    """Multivariate-t independence proposal on the active unconstrained hyperparameters."""

    active: tuple[int, ...]
    mode: np.ndarray
    chol: np.ndarray

    def draw(self, rng) -> np.ndarray:
        z = rng.standard_normal(len(self.active))
        w = rng.chisquare(T_DOF)
        return self.mode + self.chol @ z * np.sqrt(T_DOF / w)

    def log_density(self, t) -> float:
        r = solve_triangular(self.chol, np.asarray(t) - self.mode, lower=True,
                             check_finite=False)
        return float(-0.5 * (T_DOF + r.size) * np.log1p(r @ r / T_DOF))


def laplace_hyper_proposal(spec: ModelSpec, design: Design) -> HyperProposal | None:
    """Independence proposal from a Laplace approximation of the hyperparameter marginal.

    For each hyperparameter value the linear predictor is integrated out
    by a Laplace approximation around its conditional mode, with every
    Gaussian term of the model collapsed into the prior of ``eta``. The
    approximate log marginal plus log prior is maximised and its
    finite-difference Hessian sets the proposal scale. The construction is
    deterministic, so repeated fits on slightly different inputs with the
    same seed stay close. Returns ``None`` when the problem is too large
    or the approximation fails, in which case the sampler uses only its
    adaptive random-walk updates.
    """
    if spec.hyper.fixed or spec.n_units > LAPLACE_CAP:
        return None
    from scipy.optimize import minimize

    block = _Block(spec, design)
    V = spec.precision.basis
    lam = spec.precision.eigenvalues
    o = spec.mhat if spec.confounder_mode == "oob_offset" else np.zeros(spec.n_units)
    y, e, k = design.y, design.e, spec.n_units
    active = (0, 1, 2) if spec.rw2 else (0, 1)
    base = np.array([np.log(spec.hyper.tau_phi), 0.0, 0.0])
    state = {"eta": np.log((y + 0.5) / e)}

    def neg_log_marginal(ta):
        t = base.copy()
        t[list(active)] = ta
        hyp = _Hyper.from_unconstrained(t)
        if not (0.0 < hyp.rho < 1.0 and hyp.tau > 0 and np.isfinite(hyp.tau)
                and hyp.tau_f > 0 and np.isfinite(hyp.tau_f)):
            return np.inf
        s2 = spec.sigma2_m + (1.0 - hyp.rho) / hyp.tau
        a = np.sqrt(hyp.rho / hyp.tau)
        amat = np.hstack([block.F, a * V])
        pr = np.concatenate([block.prior_precision(hyp.tau_f), lam])
        mmat = np.diag(pr) + amat.T @ amat / s2
        try:
            mchol = np.linalg.cholesky(mmat)
        except np.linalg.LinAlgError:
            return np.inf
        half = solve_triangular(mchol, amat.T, lower=True, check_finite=False) / s2
        prec = np.eye(k) / s2 - half.T @ half
        logdet_p = (-k * np.log(s2) + np.log(pr).sum()
                    - 2.0 * np.log(np.diag(mchol)).sum())
        eta = state["eta"].copy()
        for _ in range(50):
            mu = e * np.exp(eta)
            grad = y - mu - prec @ (eta - o)
            hess = prec + np.diag(mu)
            try:
                hchol = np.linalg.cholesky(hess)
            except np.linalg.LinAlgError:
                return np.inf
            step = solve_triangular(hchol.T, solve_triangular(hchol, grad, lower=True,
                                                              check_finite=False),
                                    lower=False, check_finite=False)
            step = np.clip(step, -1.0, 1.0)
            eta = eta + step
            if np.max(np.abs(step)) < 1e-10:
                break
        hess = prec + np.diag(e * np.exp(eta))
        try:
            hchol = np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            return np.inf
        state["eta"] = eta  # warm start for the next evaluation
        r = eta - o
        val = (np.sum(y * eta - e * np.exp(eta)) - 0.5 * r @ prec @ r + 0.5 * logdet_p
               - np.log(np.diag(hchol)).sum() + _log_prior_hyper(spec, t))
        if not np.isfinite(val):
            return np.inf
        return -float(val)

    x0 = np.array([np.log(spec.hyper.tau_phi), 0.0, 0.0])[list(active)]
    try:
        with np.errstate(all="ignore"):
            res = minimize(neg_log_marginal, x0, method="Nelder-Mead",
                           options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 4000})
            mode = res.x
            f0 = neg_log_marginal(mode)
            n = mode.size
            h = 0.05
            hess = np.empty((n, n))
            for i in range(n):
                for j in range(i, n):
                    ei = np.eye(n)[i] * h
                    ej = np.eye(n)[j] * h
                    if i == j:
                        val = (neg_log_marginal(mode + ei) - 2 * f0
                               + neg_log_marginal(mode - ei)) / h ** 2
                    else:
                        val = (neg_log_marginal(mode + ei + ej) - neg_log_marginal(mode + ei - ej)
                               - neg_log_marginal(mode - ei + ej)
                               + neg_log_marginal(mode - ei - ej)) / (4 * h * h)
                    hess[i, j] = hess[j, i] = val
    except (FloatingPointError, ValueError, np.linalg.LinAlgError):
        return None
    if not (np.isfinite(f0) and np.all(np.isfinite(hess))):
        return None
    w, vec = np.linalg.eigh(hess)
    # flat or non-convex directions get a unit-scale floor on the precision
    w = np.maximum(w, 1.0)
    cov = (vec / w) @ vec.T * PROPOSAL_INFLATE ** 2
    return HyperProposal(active, mode, np.linalg.cholesky(cov))


class _Chain:
    def __init__(self, spec: ModelSpec, design: Design, cfg: SamplerConfig, chain: int,
                 proposal: HyperProposal | None = None):
        self.spec = spec
        self.proposal = proposal
        self.design = design
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(chain,)))
        self.block = _Block(spec, design)
        self.V = spec.precision.basis
        self.lam = spec.precision.eigenvalues
        self.sum_log_lam = float(np.log(self.lam).sum())
        self.o = spec.mhat if spec.confounder_mode == "oob_offset" else np.zeros(spec.n_units)
        self.y = design.y
        self.e = design.e
        self.k = spec.n_units
        self.F = self.block.F.copy()
        self.FtF = self.F.T @ self.F
        self.G = self.F.T @ self.V
        self.xlat = design.x.copy() if spec.latent_x else None
        h = spec.hyper
        if h.fixed:
            self.hyp = _Hyper(h.tau_phi, h.rho, 1.0)
        elif proposal is not None:
            t = np.array([np.log(h.tau_phi), 0.0, 0.0])
            t[list(proposal.active)] = proposal.draw(self.rng)
            self.hyp = _Hyper.from_unconstrained(t)
        else:
            jitter = self.rng.normal(0.0, 0.5, size=2)
            rho0 = float(np.clip(h.rho, 0.05, 0.95))
            self.hyp = _Hyper(float(h.tau_phi * np.exp(jitter[0])),
                              float(expit(np.log(rho0 / (1 - rho0)) + jitter[1])), 1.0)
        self.active = [] if h.fixed else [0, 1]
        if spec.rw2:
            self.active.append(2)
        self.log_step = np.zeros(3)
        self.acc = np.zeros(3)
        self.tries = np.zeros(3)
        self.batch_acc = np.zeros(3)
        self.n_batches = 0
        self.eta = np.log((self.y + 0.5) / self.e)
        self.b = np.zeros(self.block.d)
        self.b[0] = np.log(self.y.sum() + 0.5) - np.log((self.e * np.exp(self.o)).sum())
        self.c = np.zeros(self.lam.size)
        self.eta_acc = 0.0
        self.eta_tries = 0
        self.imh_acc = 0
        self.imh_tries = 0

    # -- helpers -----------------------------------------------------------
    def s2(self, hyp: _Hyper) -> float:
        return self.spec.sigma2_m + (1.0 - hyp.rho) / hyp.tau

    def log_prior_hyper(self, t) -> float:
        return _log_prior_hyper(self.spec, t)

    def stats(self):
        rt = self.eta - self.o
        return rt, self.F.T @ rt, self.V.T @ rt, float(rt @ rt)

    def collapsed(self, hyp: _Hyper, st):
        """Log density of eta given hyperparameters, Gaussian block integrated out."""
        rt, ftr, vtr, rtr = st
        s2 = self.s2(hyp)
        if not s2 > 0:
            return -np.inf, None
        a = np.sqrt(hyp.rho / hyp.tau)
        p0 = self.block.prior_precision(hyp.tau_f)
        puu = self.lam + a * a / s2
        pdu = (a / s2) * self.G
        wmat = pdu / puu
        smat = np.diag(p0) + self.FtF / s2 - wmat @ pdu.T
        hu = (a / s2) * vtr
        hd = ftr / s2 - wmat @ hu
        try:
            chol = np.linalg.cholesky(smat)
        except np.linalg.LinAlgError:
            return -np.inf, None
        tmp = solve_triangular(chol, hd, lower=True, check_finite=False)
        sol = solve_triangular(chol.T, tmp, lower=False, check_finite=False)
        logdet = np.log(puu).sum() + 2.0 * np.log(np.diag(chol)).sum()
        quad = float(np.sum(hu * hu / puu) + tmp @ tmp)
        val = (-0.5 * self.k * np.log(2 * np.pi * s2) - 0.5 * rtr / s2
               + 0.5 * (np.log(p0).sum() + self.sum_log_lam) - 0.5 * logdet + 0.5 * quad)
        return float(val), (chol, sol, puu, pdu, hu)

    def mean_eta(self) -> np.ndarray:
        a = np.sqrt(self.hyp.rho / self.hyp.tau)
        return self.o + self.F @ self.b + a * (self.V @ self.c)

    # -- updates -----------------------------------------------------------
    def update_x(self):
        s2x = self.spec.erf.sigma2_x
        alpha = self.b[1]
        mu = self.mean_eta()
        r = self.eta - mu + alpha * self.xlat
        s2 = self.s2(self.hyp)
        prec = 1.0 / s2x + alpha * alpha / s2
        mean = (self.design.x / s2x + alpha * r / s2) / prec
        self.xlat = mean + self.rng.standard_normal(self.k) / np.sqrt(prec)
        self.F[:, 1] = self.xlat
        self.FtF = self.F.T @ self.F
        self.G[1] = self.xlat @ self.V

    def _valid(self, hyp: _Hyper) -> bool:
        return (0.0 < hyp.rho < 1.0 and np.isfinite(hyp.tau) and hyp.tau > 0
                and np.isfinite(hyp.tau_f) and hyp.tau_f > 0)

    def _rw_hyper(self, st, cur_t, cur_lp, cur_fac, adapt):
        for j in self.active:
            prop_t = cur_t.copy()
            prop_t[j] += np.exp(self.log_step[j]) * self.rng.standard_normal()
            prop = _Hyper.from_unconstrained(prop_t)
            if self._valid(prop):
                new_lp, fac = self.collapsed(prop, st)
                new_lp += self.log_prior_hyper(prop_t)
            else:
                new_lp, fac = -np.inf, None
            self.tries[j] += 1
            if np.log(self.rng.random()) < new_lp - cur_lp:
                cur_t, cur_lp, cur_fac, self.hyp = prop_t, new_lp, fac, prop
                self.acc[j] += 1
                self.batch_acc[j] += 1
        if adapt and self.tries[self.active[0]] % ADAPT_EVERY == 0:
            self.n_batches += 1
            step = min(0.1, 1.0 / np.sqrt(self.n_batches))
            for j in self.active:
                rate = self.batch_acc[j] / ADAPT_EVERY
                self.log_step[j] += step if rate > TARGET_ACCEPT else -step
            self.batch_acc[:] = 0
        return cur_fac

    def _imh_hyper(self, st, cur_t, cur_lp, cur_fac):
        q = self.proposal
        idx = list(q.active)
        prop_t = cur_t.copy()
        prop_t[idx] = q.draw(self.rng)
        prop = _Hyper.from_unconstrained(prop_t)
        if self._valid(prop):
            new_lp, fac = self.collapsed(prop, st)
            new_lp += self.log_prior_hyper(prop_t)
        else:
            new_lp, fac = -np.inf, None
        log_acc = new_lp - cur_lp + q.log_density(cur_t[idx]) - q.log_density(prop_t[idx])
        self.imh_tries += 1
        if np.log(self.rng.random()) < log_acc:
            self.hyp = prop
            self.imh_acc += 1
            return fac, prop_t, new_lp
        return cur_fac, cur_t, cur_lp

    def update_hyper_and_block(self, adapt: bool):
        st = self.stats()
        cur_lp, cur_fac = self.collapsed(self.hyp, st)
        if self.active:
            cur_t = self.hyp.unconstrained()
            cur_lp += self.log_prior_hyper(cur_t)
            if self.proposal is not None:
                cur_fac, cur_t, cur_lp = self._imh_hyper(st, cur_t, cur_lp, cur_fac)
            cur_fac = self._rw_hyper(st, cur_t, cur_lp, cur_fac, adapt)
        if cur_fac is None:
            raise FloatingPointError("Gaussian block precision is not positive definite")
        chol, sol, puu, pdu, hu = cur_fac
        self.cond_mean = sol
        z = self.rng.standard_normal(self.block.d)
        self.b = sol + solve_triangular(chol.T, z, lower=False, check_finite=False)
        self.c = (hu - pdu.T @ self.b) / puu + self.rng.standard_normal(puu.size) / np.sqrt(puu)

    def update_eta(self):
        mu = self.mean_eta()
        prec0 = 1.0 / self.s2(self.hyp)
        y, e = self.y, self.e
        yy = y + 0.5
        t = (yy * np.log(yy / e) + prec0 * mu) / (yy + prec0)
        for _ in range(3):
            ee = e * np.exp(t)
            t = t + (y - ee - (t - mu) * prec0) / (ee + prec0)
        sd = 1.0 / np.sqrt(e * np.exp(t) + prec0)
        prop = t + sd * self.rng.standard_t(T_DOF, size=self.k)

        def logf(h):
            return y * h - e * np.exp(h) - 0.5 * prec0 * (h - mu) ** 2

        def logq(h):
            return -0.5 * (T_DOF + 1) * np.log1p(((h - t) / sd) ** 2 / T_DOF)

        with np.errstate(over="ignore", invalid="ignore"):
            log_acc = logf(prop) - logf(self.eta) + logq(self.eta) - logq(prop)
        ok = np.log(self.rng.random(self.k)) < log_acc
        self.eta = np.where(ok, prop, self.eta)
        self.eta_acc += ok.sum()
        self.eta_tries += self.k

    def sweep(self, adapt: bool):
        if self.xlat is not None:
            self.update_x()
        self.update_hyper_and_block(adapt)
        self.update_eta()

    # -- recording ---------------------------------------------------------
    def erf_params(self, b=None) -> np.ndarray:
        c = (self.b if b is None else b)[self.block.erf_slice]
        if self.spec.rw2:
            return self.design.rw2_vectors @ c
        return c.copy()

    def snapshot(self) -> dict:
        spec = self.spec
        hyp = self.hyp
        a = np.sqrt(hyp.rho / hyp.tau)
        u = self.V @ self.c
        w = self.eta - (self.o + self.F @ self.b + a * u)
        s2v = (1.0 - hyp.rho) / hyp.tau
        s2 = spec.sigma2_m + s2v
        if spec.sigma2_m > 0:
            frac = spec.sigma2_m / s2
            eps = frac * w + np.sqrt(spec.sigma2_m * s2v / s2) * self.rng.standard_normal(self.k)
        else:
            eps = np.zeros(self.k)
        vpart = w - eps
        v = vpart / np.sqrt(s2v) if s2v > 0 else np.zeros(self.k)
        f = self.erf_params()
        if spec.rw2:
            g = f[self.design.bins]
        else:
            g = f[0] * (self.xlat if self.xlat is not None else self.design.x)
        if spec.confounder_mode == "linear":
            m = self.design.z @ self.b[self.block.delta_slice] if self.design.z.shape[1] \
                else np.zeros(self.k)
        else:
            m = self.o + eps
        return dict(beta0=self.b[0], erf_params=f, delta=self.b[self.block.delta_slice].copy(),
                    u=u, v=v, phi=a * u + vpart, tau_phi=hyp.tau, rho=hyp.rho,
                    tau_f=hyp.tau_f, g=g, eta=self.eta.copy(), m=m,
                    latent_x=None if self.xlat is None else self.xlat.copy())

    def run(self) -> dict:
        cfg = self.cfg
        for _ in range(cfg.burn_in):
            self.sweep(adapt=True)
        n_keep = cfg.keep_per_chain
        keep_at = set(np.floor(np.arange(n_keep) * (cfg.n_iter / n_keep)).astype(int).tolist())
        n_tr = -(-cfg.n_iter // cfg.thin)
        traces = {name: np.empty(n_tr) for name in ("beta0", "tau_phi", "rho", "tau_f")}
        n_erf = self.erf_params().size
        erf_trace = np.empty((n_tr, n_erf))
        delta_trace = np.empty((n_tr, self.block.delta_slice.stop - self.block.delta_slice.start))
        kept = []
        rb_sum = np.zeros(n_erf)
        self.acc[:] = 0
        self.tries[:] = 0
        self.eta_acc = 0.0
        self.eta_tries = 0
        self.imh_acc = self.imh_tries = 0
        for it in range(cfg.n_iter):
            self.sweep(adapt=False)
            rb_sum += self.erf_params(self.cond_mean)
            if it % cfg.thin == 0:
                j = it // cfg.thin
                traces["beta0"][j] = self.b[0]
                traces["tau_phi"][j] = self.hyp.tau
                traces["rho"][j] = self.hyp.rho
                traces["tau_f"][j] = self.hyp.tau_f
                erf_trace[j] = self.erf_params()
                delta_trace[j] = self.b[self.block.delta_slice]
            if it in keep_at:
                kept.append(self.snapshot())
        acc = {name: float(self.acc[j] / self.tries[j]) for j, name in
               zip(range(3), ("tau_phi", "rho", "tau_f")) if j in self.active and self.tries[j]}
        acc["eta"] = float(self.eta_acc / max(self.eta_tries, 1))
        if self.imh_tries:
            acc["hyper_imh"] = float(self.imh_acc / self.imh_tries)
        return dict(traces=traces, erf_trace=erf_trace, delta_trace=delta_trace,
                    kept=kept, acceptance=acc, erf_rb=rb_sum / cfg.n_iter)


def _run_chain(spec, design, cfg, chain, proposal):
    return _Chain(spec, design, cfg, chain, proposal).run()


def sample_posterior(data: Dataset | Design, spec: ModelSpec,
                     config: SamplerConfig | None = None) -> PosteriorSamples:
    """Draw from the Step-2 posterior; deterministic given ``config.seed``."""
    cfg = config or SamplerConfig()
    design = data if isinstance(data, Design) else make_design(data, spec)
    if spec.n_units < 2:
        raise ValueError("sampling needs at least two units")
    if design.y.size != spec.n_units:
        raise ValueError("dataset and spatial precision disagree on the number of units")
    proposal = laplace_hyper_proposal(spec, design)
    if cfg.n_jobs == 1 or cfg.n_chains == 1:
        outs = [_run_chain(spec, design, cfg, c, proposal) for c in range(cfg.n_chains)]
    else:
        outs = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_run_chain)(spec, design, cfg, c, proposal) for c in range(cfg.n_chains))
    kept = [snap for o in outs for snap in o["kept"]]

    def stack(name):
        return np.array([s[name] for s in kept])

    traces = {name: np.stack([o["traces"][name] for o in outs])
              for name in ("beta0", "tau_phi", "rho")}
    erf_trace = np.stack([o["erf_trace"] for o in outs])
    delta_trace = np.stack([o["delta_trace"] for o in outs])
    if spec.rw2:
        traces["tau_f"] = np.stack([o["traces"]["tau_f"] for o in outs])
    else:
        traces["alpha"] = erf_trace[:, :, 0]
    for j in range(delta_trace.shape[2]):
        traces[f"delta{j + 1}"] = delta_trace[:, :, j]
    rhat = {}
    for name, tr in traces.items():
        if name in ("tau_phi", "tau_f"):
            tr = np.log(tr)
        if spec.hyper.fixed and name in ("tau_phi", "rho"):
            continue
        rhat[name] = split_rhat(tr)
    if spec.rw2:
        for j in range(erf_trace.shape[2]):
            rhat[f"f{j}"] = split_rhat(erf_trace[:, :, j])
    warnings = [f"split R-hat for {name} is {val:.3f} (> {cfg.rhat_threshold})"
                for name, val in rhat.items() if np.isfinite(val) and val > cfg.rhat_threshold]
    for w in warnings:
        logger.warning(w)
    acc = {key: float(np.mean([o["acceptance"][key] for o in outs]))
           for key in outs[0]["acceptance"]}
    latent_m = stack("m") if spec.latent_m else None
    return PosteriorSamples(
        beta0=stack("beta0"), erf_params=stack("erf_params"), delta=stack("delta"),
        u=stack("u"), v=stack("v"), phi=stack("phi"), tau_phi=stack("tau_phi"),
        rho=stack("rho"), g=stack("g"), eta=stack("eta"), m=stack("m"),
        tau_f=stack("tau_f") if spec.rw2 else None, latent_m=latent_m,
        latent_x=stack("latent_x") if spec.latent_x else None,
        traces=traces, erf_trace=erf_trace,
        erf_mean_rb=np.mean([o["erf_rb"] for o in outs], axis=0),
        rhat=rhat, acceptance=acc, warnings=warnings)
