"""Alternating forest / spatial-model fitting and its one-pass variants.

Each iteration trains a multi-sample forest on adjusted responses built
from posterior draws of ``g + phi`` (Step 1), then refits the spatial
Poisson model with the forest's out-of-bag estimate as a noisy offset
(Step 2). Step 1 and Step 2 reuse the same random seeds in every
iteration, so successive fits share their random numbers and the change in
the ERF between iterations is driven mostly by the changed inputs rather
than by fresh Monte Carlo noise.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .areal import ArealMap, Dataset, InputError
from .diagnostics import moran_permutation_test, pearson_residuals
from .erf import ErfPosterior, ErfSpec, bin_index, erf_grid, rr_report
from .forest import (OobEstimate, ForestParams, fit_forest, fit_multisample_forest, oob_estimate,
                     oob_sums, sample_seed, tune_forest)
from .inference import (Design, ModelSpec, PosteriorSamples, SamplerConfig, deviance_summaries,
                        fitted_log_risk, make_design, sample_posterior, waic)
from .spatial import Bym2Hyperparams, ScaledIcarPrecision, scaled_icar

logger = logging.getLogger(__name__)

MODES = ("full", "one_shot")
MODEL_LABELS = {"spar": "SPAR-Forest-ERF", "spar1": "SPAR-Forest-ERF-1", "glmm": "GLMM"}
MIN_UNITS = 10


@dataclass(frozen=True)
class SparConfig:
    """Settings of the alternating algorithm.

    ``sampler`` controls every Step-2 run; its ``n_samples`` is replaced by
    ``q_samples``. ``tuning_trees`` and ``tuning_grid`` configure the
    forest tuning done once per iteration on the mean adjusted response.
    ``moran_permutations`` sets the permutation count of the residual
    Moran test reported in the fit metrics.
    """

    epsilon: float = 5e-4
    q_samples: int = 100
    trees_per_sample: int = 10
    max_iterations: int = 30
    zero_count_offset: float = 0.5
    mode: str = "full"
    seed: int = 0
    tuning_trees: int = 500
    tuning_grid: tuple | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hyper: Bym2Hyperparams = field(default_factory=Bym2Hyperparams)
    moran_permutations: int = 999

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.q_samples < 1 or self.trees_per_sample < 1 or self.max_iterations < 1:
            raise ValueError("q_samples, trees_per_sample and max_iterations must be positive")
        if not self.zero_count_offset >= 0:
            raise ValueError("zero_count_offset must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.q_samples > self.sampler.total_keep:
            raise ValueError("q_samples exceeds the number of retained posterior draws")

    def sampler_config(self, seed: int) -> SamplerConfig:
        return replace(self.sampler, n_samples=self.q_samples, seed=seed)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class PhiSummary:
    mean: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray


@dataclass
class FitResult:
    """Final inference bundle of a fit.

    ``erf_posterior`` lives on a 100-point grid over the observed exposure
    range; ``erf_units`` holds the same draws evaluated at each unit's
    observed exposure, which is what simulation scoring uses.
    """

    model: str
    erf_spec: ErfSpec
    erf_posterior: ErfPosterior
    erf_units: ErfPosterior
    erf_mean_units: np.ndarray
    phi_posterior: PhiSummary
    mhat_final: OobEstimate | None
    iterations: int
    erf_trace: list[float]
    metrics: dict
    converged: bool
    samples: PosteriorSamples
    spec: ModelSpec
    design: Design
    data: Dataset
    sigma2_trace: list[float] = field(default_factory=list)
    sample_hashes: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return MODEL_LABELS.get(self.model, self.model)

    def fitted_log_risk(self) -> np.ndarray:
        return fitted_log_risk(self.samples, self.design, self.spec)

    # -- report writers ----------------------------------------------------
    def write_report(self, out_dir, timestamp: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / n for n in ("fit_report.txt", "erf_curve.csv", "phi_map.csv",
                                   "posterior_samples.csv", "metrics.csv", "trace.csv")]
        self._write_text(paths[0], timestamp)
        self.erf_posterior.write_csv(paths[1])
        self._write_phi(paths[2])
        self._write_samples(paths[3])
        self._write_metrics(paths[4])
        self._write_trace(paths[5])
        return paths

    def _write_text(self, path, timestamp):
        lines = []
        if timestamp:
            lines.append(f"timestamp = {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
        x = self.design.x
        lines += [
            f"model = {self.label}",
            f"erf = {self.erf_spec.kind}",
            f"exposure = {self.data.exposure_names[self.erf_spec.exposure_index]}",
            f"n_units = {self.data.n_units}",
            f"iterations = {self.iterations}",
            f"converged = {str(self.converged).lower()}",
            f"final_mean_abs_diff = {self.erf_trace[-1]!r}",
            f"posterior_draws = {self.samples.n_samples}",
        ]
        if self.mhat_final is not None:
            lines.append(f"sigma2_m = {self.mhat_final.sigma2_m!r}")
        for key, val in self.metrics.items():
            lines.append(f"{key} = {val!r}")
        if not self.spec.rw2:
            alpha = self.samples.erf_params[:, 0]
            lo, hi = np.percentile(alpha, [2.5, 97.5])
            lines.append(f"alpha_mean = {float(alpha.mean())!r}")
            lines.append(f"alpha_lower95 = {float(lo)!r}")
            lines.append(f"alpha_upper95 = {float(hi)!r}")
            sd = float(np.std(x))
            if sd > 0:
                rr = rr_report(alpha, sd)
                lines.append(f"rr_per_sd_increment = {sd!r}")
                lines.append(f"rr_mean = {rr.rr_mean!r}")
                lines.append(f"rr_lower95 = {rr.rr_lower95!r}")
                lines.append(f"rr_upper95 = {rr.rr_upper95!r}")
        lines.append(f"tau_phi_mean = {float(self.samples.tau_phi.mean())!r}")
        lines.append(f"rho_mean = {float(self.samples.rho.mean())!r}")
        for name, val in sorted(self.samples.rhat.items()):
            lines.append(f"rhat_{name} = {val!r}")
        for w in self.warnings:
            lines.append(f"warning = {w}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def _write_phi(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "mean", "lower95", "upper95"])
            p = self.phi_posterior
            for k, uid in enumerate(self.data.unit_ids):
                w.writerow([uid, repr(float(p.mean[k])), repr(float(p.lower95[k])),
                            repr(float(p.upper95[k]))])

    def _write_samples(self, path):
        s = self.samples
        cols, blocks = ["beta0"], [s.beta0[:, None]]
        if self.spec.rw2:
            cols += [f"f_{j}" for j in range(s.erf_params.shape[1])]
        else:
            cols.append("alpha")
        blocks.append(s.erf_params)
        if s.delta.shape[1]:
            cols += [f"delta_{n}" for n in self.data.confounder_names]
            blocks.append(s.delta)
        cols += [f"phi_{u}" for u in self.data.unit_ids]
        blocks.append(s.phi)
        cols += ["tau_phi", "rho"]
        blocks += [s.tau_phi[:, None], s.rho[:, None]]
        if s.tau_f is not None:
            cols.append("tau_f")
            blocks.append(s.tau_f[:, None])
        table = np.hstack(blocks)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    def _write_metrics(self, path):
        keys = ["d_bar", "d_at_mean", "waic", "p_w", "moran_i", "moran_p"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + keys)
            w.writerow([self.label] + [repr(float(self.metrics[k])) for k in keys])

    def _write_trace(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_abs_diff", "sigma2_m"])
            for i, diff in enumerate(self.erf_trace):
                s2 = self.sigma2_trace[i] if i < len(self.sigma2_trace) else float("nan")
                w.writerow([i + 1, repr(float(diff)), repr(float(s2))])


# ---------------------------------------------------------------------------
# building blocks


def adjusted_responses(data: Dataset, g_plus_phi=None, offset: float = 0.5) -> np.ndarray:
    """``log((y + delta) / e) - (g + phi)`` with ``delta`` applied only where ``y = 0``.

    ``g_plus_phi`` is ``(Q, K)``; ``None`` means the zero initialisation and
    returns a single row.
    """
    y = data.y.astype(float)
    base = np.log((y + np.where(data.y == 0, offset, 0.0)) / data.e)
    if g_plus_phi is None:
        return base[None, :]
    gp = np.atleast_2d(np.asarray(g_plus_phi, dtype=float))
    if gp.shape[1] != data.n_units:
        raise ValueError("g_plus_phi must have K columns")
    return base[None, :] - gp


def array_hash(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()[:16]


def erf_draws_at(samples: PosteriorSamples, design: Design, spec: ModelSpec, x) -> np.ndarray:
    """Every retained ERF draw evaluated at exposure values ``x``."""
    x = np.asarray(x, dtype=float)
    f = samples.erf_params
    if spec.rw2:
        return f[:, bin_index(x, design.bin_edges)]
    return f[:, :1] * x[None, :]


def erf_mean_at(samples: PosteriorSamples, design: Design, spec: ModelSpec, x) -> np.ndarray:
    """Rao-Blackwellised posterior-mean ERF at ``x``."""
    x = np.asarray(x, dtype=float)
    f = samples.erf_mean_rb if samples.erf_mean_rb is not None else samples.erf_params.mean(0)
    if spec.rw2:
        return f[bin_index(x, design.bin_edges)]
    return f[0] * x


def _check(data: Dataset, amap: ArealMap, erf_spec: ErfSpec):
    if data.n_units != amap.n_units:
        raise InputError("dataset and map disagree on the number of units")
    if data.n_units < MIN_UNITS:
        raise InputError(f"fitting needs at least {MIN_UNITS} units")
    if not 0 <= erf_spec.exposure_index < data.exposures.shape[1]:
        raise InputError("exposure_index is out of range")
    if np.any(amap.degrees == 0):
        raise InputError("the map has islands; repair them before fitting")


def _seeds(seed: int):
    return {"sampler": sample_seed(seed, 1), "forest": sample_seed(seed, 2),
            "tune": sample_seed(seed, 3), "moran": sample_seed(seed, 4)}


def _finish(model, data, amap, erf_spec, spec, design, samples, *, mhat_final,
            iterations, trace, sigma2_trace, hashes, config: SparConfig, seeds) -> FitResult:
    x = design.x
    grid = erf_grid(x, 100)
    erf_post = ErfPosterior.from_samples(grid, erf_draws_at(samples, design, spec, grid))
    erf_units = ErfPosterior.from_samples(x, erf_draws_at(samples, design, spec, x))
    phi = samples.phi
    lo, hi = np.percentile(phi, [2.5, 97.5], axis=0)
    pm = phi.mean(axis=0)
    phi_sum = PhiSummary(pm, np.minimum(lo, pm), np.maximum(hi, pm))
    metrics = fit_metrics(samples, design, spec, amap, config.moran_permutations, seeds["moran"])
    # the one-pass models have nothing to iterate, so they count as converged
    converged = bool(trace and trace[-1] < config.epsilon) if model == "spar" else True
    warnings = list(samples.warnings)
    if mhat_final is not None and mhat_final.n_fallback:
        warnings.append(f"{mhat_final.n_fallback} unit(s) had no out-of-bag trees")
    return FitResult(model, erf_spec, erf_post, erf_units, erf_mean_at(samples, design, spec, x),
                     phi_sum, mhat_final, iterations, trace, metrics, converged, samples, spec,
                     design, data, sigma2_trace, hashes, warnings)


def fit_metrics(samples, design, spec, amap, n_permutations=999, seed=0) -> dict:
    """Deviance summaries, WAIC and Moran's I of Pearson residuals."""
    d_bar, d_hat = deviance_summaries(samples, design, spec)
    w, pw = waic(samples, design, spec)
    mu = design.e * np.exp(fitted_log_risk(samples, design, spec))
    resid = pearson_residuals(design.y, mu)
    try:
        res = moran_permutation_test(resid, amap, n_permutations, seed)
        mi, mp = res.i_stat, res.p_value
    except InputError:
        mi, mp = float("nan"), float("nan")
    return {"d_bar": d_bar, "d_at_mean": d_hat, "waic": w, "p_w": pw,
            "moran_i": mi, "moran_p": mp}


def _precision(amap, precision):
    return precision if precision is not None else scaled_icar(amap)


# ---------------------------------------------------------------------------
# the three models


def run_spar(data: Dataset, amap: ArealMap, erf_spec: ErfSpec,
             config: SparConfig | None = None,
             precision: ScaledIcarPrecision | None = None) -> FitResult:
    """Iterate Step 1 and Step 2 until the ERF stabilises."""
    config = config or SparConfig()
    if config.mode == "one_shot":
        return run_one_shot(data, amap, erf_spec, config, precision)
    _check(data, amap, erf_spec)
    prec = _precision(amap, precision)
    seeds = _seeds(config.seed)
    z = data.confounders
    if z.shape[1] == 0:
        raise InputError("the forest needs at least one confounder column")
    x = data.exposure(erf_spec.exposure_index)
    g_prev = np.zeros(data.n_units)
    exported = None
    trace, s2_trace, hashes = [], [], []
    design = spec = samples = est = None
    for it in range(1, config.max_iterations + 1):
        if exported is None:
            r_samples = np.repeat(adjusted_responses(data, None, config.zero_count_offset),
                                  config.q_samples, axis=0)
            consumed = None
        else:
            r_samples = adjusted_responses(data, exported, config.zero_count_offset)
            consumed = array_hash(exported)
        tuned = tune_forest(z, r_samples.mean(axis=0), config.tuning_grid,
                            config.tuning_trees, seeds["tune"])
        params = ForestParams(config.trees_per_sample, tuned.mtry, tuned.minnode, seeds["forest"])
        _, est = fit_multisample_forest(z, r_samples, params)
        spec = ModelSpec(erf=erf_spec, precision=prec, mhat=est.m_hat, sigma2_m=est.sigma2_m,
                         hyper=config.hyper)
        if design is None:
            design = make_design(data, spec)
        samples = sample_posterior(design, spec, config.sampler_config(seeds["sampler"]))
        g_now = erf_mean_at(samples, design, spec, x)
        diff = float(np.mean(np.abs(g_now - g_prev)))
        exported = samples.thinned(config.q_samples).g_plus_phi
        trace.append(diff)
        s2_trace.append(est.sigma2_m)
        hashes.append({"iteration": it, "consumed": consumed, "exported": array_hash(exported),
                       "mtry": tuned.mtry, "minnode": tuned.minnode})
        logger.info("iteration %d: mean |dg| = %.3g, sigma2_m = %.4g, mtry=%d minnode=%d",
                    it, diff, est.sigma2_m, tuned.mtry, tuned.minnode)
        g_prev = g_now
        if diff < config.epsilon:
            break
    return _finish("spar", data, amap, erf_spec, spec, design, samples, mhat_final=est,
                   iterations=len(trace), trace=trace, sigma2_trace=s2_trace, hashes=hashes,
                   config=config, seeds=seeds)


def run_one_shot(data: Dataset, amap: ArealMap, erf_spec: ErfSpec,
                 config: SparConfig | None = None,
                 precision: ScaledIcarPrecision | None = None) -> FitResult:
    """One forest on the raw log-SMR, then one spatial fit, no feedback."""
    config = config or SparConfig(mode="one_shot")
    _check(data, amap, erf_spec)
    prec = _precision(amap, precision)
    seeds = _seeds(config.seed)
    z = data.confounders
    if z.shape[1] == 0:
        raise InputError("the forest needs at least one confounder column")
    r = adjusted_responses(data, None, config.zero_count_offset)[0]
    tuned = tune_forest(z, r, config.tuning_grid, config.tuning_trees, seeds["tune"])
    params = ForestParams(config.q_samples * config.trees_per_sample, tuned.mtry, tuned.minnode,
                          seeds["forest"])
    forest = fit_forest(z, r, params)
    sums, counts, full = oob_sums(forest, z)
    est = oob_estimate(sums, counts, full, counts * r)
    spec = ModelSpec(erf=erf_spec, precision=prec, mhat=est.m_hat, sigma2_m=est.sigma2_m,
                     hyper=config.hyper)
    design = make_design(data, spec)
    samples = sample_posterior(design, spec, config.sampler_config(seeds["sampler"]))
    x = design.x
    diff = float(np.mean(np.abs(erf_mean_at(samples, design, spec, x))))
    hashes = [{"iteration": 1, "consumed": None,
               "exported": array_hash(samples.thinned(config.q_samples).g_plus_phi),
               "mtry": tuned.mtry, "minnode": tuned.minnode}]
    return _finish("spar1", data, amap, erf_spec, spec, design, samples, mhat_final=est,
                   iterations=1, trace=[diff], sigma2_trace=[est.sigma2_m], hashes=hashes,
                   config=config, seeds=seeds)


def run_glmm_baseline(data: Dataset, amap: ArealMap, erf_spec: ErfSpec,
                      config: SparConfig | None = None,
                      precision: ScaledIcarPrecision | None = None,
                      confounders=None) -> FitResult:
    """Spatial Poisson model with linear confounder terms and no forest.

    ``confounders`` optionally replaces the dataset's confounder matrix.
    """
    config = config or SparConfig()
    if confounders is not None:
        data = replace(data, confounders=np.asarray(confounders, dtype=float),
                       confounder_names=())
    _check(data, amap, erf_spec)
    prec = _precision(amap, precision)
    seeds = _seeds(config.seed)
    spec = ModelSpec(erf=erf_spec, precision=prec, confounder_mode="linear", hyper=config.hyper)
    design = make_design(data, spec)
    samples = sample_posterior(design, spec, config.sampler_config(seeds["sampler"]))
    diff = float(np.mean(np.abs(erf_mean_at(samples, design, spec, design.x))))
    return _finish("glmm", data, amap, erf_spec, spec, design, samples, mhat_final=None,
                   iterations=1, trace=[diff], sigma2_trace=[], hashes=[], config=config,
                   seeds=seeds)


def fit_model(model: str, data: Dataset, amap: ArealMap, erf_spec: ErfSpec,
              config: SparConfig | None = None,
              precision: ScaledIcarPrecision | None = None) -> FitResult:
    """Dispatch on ``"spar"``, ``"spar1"`` or ``"glmm"``."""
    if model == "spar":
        return run_spar(data, amap, erf_spec, replace(config or SparConfig(), mode="full"),
                        precision)
    if model == "spar1":
        return run_one_shot(data, amap, erf_spec, replace(config or SparConfig(), mode="one_shot"),
                            precision)
    if model == "glmm":
        return run_glmm_baseline(data, amap, erf_spec, config, precision)
    raise InputError(f"unknown model {model!r}; choose from {sorted(MODEL_LABELS)}")
