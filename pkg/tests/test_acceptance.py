"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk-scale study shares one module-level run of 20 replicates per
scenario on a 15x15 lattice. It uses a shortened sampler (two chains of
1500 + 1500 sweeps) so that it finishes in under two hours on one core.
"""

import os
import time

import numpy as np
import pytest
from scipy.stats import poisson

from sparforest.areal import Dataset, build_adjacency, lattice_map
from sparforest.diagnostics import moran_permutation_test, morans_i
from sparforest.erf import ErfSpec
from sparforest.forest import (ForestParams, fit_forest, fit_multisample_forest, oob_estimate,
                               oob_predict, sample_seed)
from sparforest.inference import (ModelSpec, SamplerConfig, deviance_summaries, flatten,
                                  grad_log_posterior, initial_state, log_posterior, make_design,
                                  mcse_mean, mcse_sd, sample_posterior, unflatten, waic)
from sparforest.spar import SparConfig
from sparforest.spatial import Bym2Hyperparams, scaled_icar
from sparforest.study import run_study, summarize, write_study

# grid-quadrature oracle for the slope on the K=3 path toy (tau=4, rho=0.5 fixed)
PATH3_ALPHA_MEAN, PATH3_ALPHA_SD = 0.9548303098, 1.0204564343

DESK_SIDE = 15
DESK_REPLICATES = 20
DESK_SCENARIO = "common-linear-good"
LINEARCONF_SCENARIO = "common-linear-good-linearconf"
DESK_SAMPLER = SamplerConfig(n_iter=1500, burn_in=1500, n_chains=2, n_keep=1000)
DESK_BUDGET_CORE_SECONDS = 8 * 2 * 3600.0


def random_connected_map(rng, k):
    edges = [(int(rng.integers(0, i)), i) for i in range(1, k)]
    for _ in range(int(rng.integers(0, k))):
        a, b = rng.choice(k, 2, replace=False)
        edges.append((int(a), int(b)))
    return build_adjacency(edges, k)


# ---------------------------------------------------------------------------
# exact-arithmetic criteria


def test_precision_scaling(verdict):
    rng = np.random.default_rng(2025)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        s = scaled_icar(random_connected_map(rng, int(rng.integers(2, 31))))
        var = np.diag(np.linalg.pinv(s.q_matrix.toarray()))
        worst = max(worst, abs(np.exp(np.mean(np.log(var))) - 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 1.0
    verdict("precision scaling", ok, f"max |geomean - 1| = {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_moran_oracle(verdict):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(3, 21))
        amap = random_connected_map(rng, k)
        w = amap.dense()
        x = rng.standard_normal(k)
        xc = x - x.mean()
        num = sum(w[i, j] * xc[i] * xc[j] for i in range(k) for j in range(k))
        oracle = k / w.sum() * num / np.sum(xc ** 2)
        worst = max(worst, abs(morans_i(x, amap) - oracle))
    checker = morans_i(np.array([1.0, -1.0, -1.0, 1.0]), lattice_map(2))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and checker == -1.0 and elapsed < 1.0
    verdict("Moran's I oracle", ok,
            f"max error {worst:.1e}, checkerboard I = {checker!r}, {elapsed:.2f}s")
    assert ok


def test_gradient_check(verdict):
    rng = np.random.default_rng(11)
    amap = lattice_map(3)
    x = rng.random(9)
    e = rng.uniform(5, 15, 9)
    data = Dataset(y=rng.poisson(e * np.exp(0.3 * x)), e=e, exposures=x[:, None],
                   confounders=rng.random((9, 2)))
    prec = scaled_icar(amap)
    t0 = time.perf_counter()
    worst = 0.0
    for erf in (ErfSpec("linear"), ErfSpec("pspline_rw2", n_bins=6),
                ErfSpec("berkson_linear", sigma2_x=0.05)):
        for mode in ("oob_offset", "linear"):
            kw = dict(mhat=rng.normal(0, 0.2, 9), sigma2_m=0.1) if mode == "oob_offset" else {}
            spec = ModelSpec(erf=erf, precision=prec, confounder_mode=mode, **kw)
            design = make_design(data, spec)
            base = flatten(initial_state(spec, design), spec, design)
            for _ in range(20):
                theta = base + rng.normal(0, 0.3, base.size)
                grad = flatten(grad_log_posterior(unflatten(theta, spec, design), design, spec),
                               spec, design)
                fd = np.empty_like(theta)
                for i in range(theta.size):
                    h = 1e-5 * max(1.0, abs(theta[i]))
                    up, dn = theta.copy(), theta.copy()
                    up[i] += h
                    dn[i] -= h
                    fd[i] = (log_posterior(unflatten(up, spec, design), design, spec)
                             - log_posterior(unflatten(dn, spec, design), design, spec)) / (2 * h)
                worst = max(worst, np.linalg.norm(fd - grad) / np.linalg.norm(grad))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10.0
    verdict("gradient check", ok, f"max relative error {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_posterior_oracle(verdict):
    amap = build_adjacency([(0, 1), (1, 2)], 3)
    data = Dataset(y=[8, 12, 20], e=np.full(3, 10.0), exposures=[[0.0], [0.5], [1.0]],
                   confounders=np.zeros((3, 0)))
    spec = ModelSpec(erf=ErfSpec(), precision=scaled_icar(amap),
                     hyper=Bym2Hyperparams(tau_phi=4.0, rho=0.5, fixed=True))
    t0 = time.perf_counter()
    s = sample_posterior(data, spec, SamplerConfig(n_iter=20000, burn_in=2000, n_chains=4,
                                                   seed=2))
    elapsed = time.perf_counter() - t0
    a = s.traces["alpha"]
    zm = (a.mean() - PATH3_ALPHA_MEAN) / mcse_mean(a)
    zs = (a.std(ddof=1) - PATH3_ALPHA_SD) / mcse_sd(a)
    ok = abs(zm) < 3 and abs(zs) < 3 and elapsed < 120
    verdict("posterior oracle", ok, f"mean z = {zm:+.2f}, sd z = {zs:+.2f} MCSE, {elapsed:.0f}s")
    assert ok


def test_waic_deviance_oracle(verdict):
    from types import SimpleNamespace
    amap = build_adjacency([(0, 1), (1, 2)], 3)
    data = Dataset(y=[3, 0, 7], e=[2.0, 1.5, 4.0], exposures=[[0.1], [0.4], [0.9]],
                   confounders=np.zeros((3, 0)))
    mhat = np.array([0.1, -0.2, 0.05])
    spec = ModelSpec(erf=ErfSpec(), precision=scaled_icar(amap), mhat=mhat)
    beta0 = np.array([0.2, -0.1])
    g = np.array([[0.01, 0.04, 0.09], [0.02, 0.08, 0.18]])
    phi = np.array([[0.3, -0.1, -0.2], [-0.05, 0.15, -0.1]])
    eta = beta0[:, None] + g + phi + mhat
    s = SimpleNamespace(beta0=beta0, g=g, phi=phi, eta=eta, delta=np.zeros((2, 0)))
    y, e = np.array(data.y), np.array(data.e)
    lik = poisson.pmf(y, e * np.exp(eta))
    pw = sum(np.var(np.log(lik[:, k]), ddof=1) for k in range(3))
    want_waic = -2 * (np.log(lik.mean(axis=0)).sum() - pw)
    want_dbar = np.mean(-2 * np.log(lik).sum(axis=1))
    want_dhat = -2 * poisson.logpmf(y, e * np.exp(eta.mean(axis=0))).sum()
    w, p = waic(s, data, spec)
    d_bar, d_hat = deviance_summaries(s, data, spec)
    err = max(abs(w - want_waic), abs(p - pw), abs(d_bar - want_dbar), abs(d_hat - want_dhat))
    ok = err < 1e-10
    verdict("WAIC / deviance oracle", ok, f"max error {err:.1e}")
    assert ok


def test_oob_exclusion(verdict):
    rng = np.random.default_rng(5)
    z = rng.random((30, 3))
    r = np.sin(4 * z[:, 0]) + rng.normal(0, 0.1, 30)
    f = fit_forest(z, r, ForestParams(60, 2, 3, seed=4))
    preds = f.tree_predictions(z)
    pred, counts = oob_predict(f, z)
    excl = True
    for k in range(30):
        used = np.flatnonzero(f.inbag[:, k] == 0)
        excl &= counts[k] == used.size
        if used.size:
            excl &= abs(pred[k] - preds[used, k].mean()) < 1e-12
    # hand-built Q=2, K=3 aggregation
    n = np.array([[2, 0, 1], [1, 3, 0]])
    s = np.array([[1.0, 0.0, 0.9], [0.2, 1.5, 0.0]])
    resp = np.array([[1.0, 2.0, 0.4], [0.5, 0.6, 9.0]])
    est = oob_estimate(s.sum(0), n.sum(0), np.zeros(3), (n * resp).sum(0))
    m = np.array([1.2 / 3, 0.5, 0.9])
    rt = np.array([2.5 / 3, 0.6, 0.4])
    hand = (np.allclose(est.m_hat, m, atol=1e-15) and np.allclose(est.r_tilde, rt, atol=1e-15)
            and abs(est.sigma2_m - np.mean((rt - m) ** 2)) < 1e-15)
    # a fitted two-sample forest against brute force
    rs = rng.standard_normal((2, 12))
    z12 = rng.random((12, 2))
    pooled, est2 = fit_multisample_forest(z12, rs, ForestParams(10, 1, 2, seed=11))
    tp = pooled.tree_predictions(z12)
    owner = np.repeat([0, 1], 10)
    brute = True
    for k in range(12):
        oob = np.flatnonzero(pooled.inbag[:, k] == 0)
        brute &= abs(est2.m_hat[k] - tp[oob, k].mean()) < 1e-12
        brute &= abs(est2.r_tilde[k] - rs[owner[oob], k].mean()) < 1e-12
    sub = fit_forest(z12, rs[1], ForestParams(10, 1, 2, seed=sample_seed(11, 1)))
    brute &= bool(np.array_equal(sub.inbag, pooled.inbag[10:]))
    ok = bool(excl and hand and brute)
    verdict("OOB exclusion", ok, f"exhaustive={bool(excl)}, hand-built={hand}, "
            f"brute-force={bool(brute)}")
    assert ok


def test_permutation_calibration(verdict):
    rng = np.random.default_rng(99)
    amap = lattice_map(15)
    t0 = time.perf_counter()
    rejections = 0
    for rep in range(400):
        res = moran_permutation_test(rng.standard_normal(amap.n_units), amap, 1999, seed=rep)
        rejections += res.p_value <= 0.05
    rate = rejections / 400
    ok = 0.03 <= rate <= 0.07
    verdict("permutation calibration", ok,
            f"rejection rate {100 * rate:.2f}% over 400 i.i.d. fields, "
            f"{time.perf_counter() - t0:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# desk-scale simulation study


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Scenario 5 with all three models and scenario 9 with SPAR and GLMM."""
    amap = lattice_map(DESK_SIDE)
    erf = ErfSpec("linear", exposure_index=1)
    config = SparConfig(sampler=DESK_SAMPLER)
    jobs = os.cpu_count() or 1
    t0 = time.perf_counter()
    main = run_study([DESK_SCENARIO], DESK_REPLICATES, ("spar", "spar1", "glmm"), amap, erf,
                     config, seed=2024, n_jobs=jobs)
    lin = run_study([LINEARCONF_SCENARIO], DESK_REPLICATES, ("spar", "glmm"), amap, erf,
                    config, seed=2024, n_jobs=jobs)
    wall = time.perf_counter() - t0
    rows = main + lin
    out = tmp_path_factory.mktemp("desk_study")
    write_study(out, rows)
    print(f"\ndesk study tables written to {out}")
    summary = {(r["scenario"], r["model"]): r for r in summarize(rows)}
    print("\nscenario                       model  n_ok  med_bias  med_rmse  mean_cov  mean_miw")
    for (scen, model), r in summary.items():
        print(f"{scen:30s} {model:6s} {r['n_ok']:4d}  {r['median_bias']:+.4f}   "
              f"{r['median_rmse']:.4f}   {r['mean_coverage']:6.1f}    {r['mean_miw']:.4f}")
    return {"rows": rows, "summary": summary, "wall": wall, "jobs": jobs}


def _rows(desk, scenario, model):
    return [r for r in desk["rows"] if r.scenario == scenario and r.model == model]


@pytest.mark.slow
def test_desk_study_runs_within_budget(desk, verdict):
    failed = [r for r in desk["rows"] if not r.ok]
    core_seconds = desk["wall"] * desk["jobs"]
    ok = not failed and core_seconds < DESK_BUDGET_CORE_SECONDS
    verdict("desk study: all fits complete within budget", ok,
            f"{len(failed)} failed fits, {desk['wall'] / 60:.0f} min wall on {desk['jobs']} "
            f"core(s), budget {DESK_BUDGET_CORE_SECONDS / 3600:.0f} core-hours")
    assert ok


@pytest.mark.slow
def test_desk_a_rmse_reduction(desk, verdict):
    spar = desk["summary"][(DESK_SCENARIO, "spar")]["median_rmse"]
    glmm = desk["summary"][(DESK_SCENARIO, "glmm")]["median_rmse"]
    ok = spar <= 0.8 * glmm
    verdict("desk study (a): SPAR median RMSE <= 0.8 x GLMM", ok,
            f"SPAR {spar:.4f}, GLMM {glmm:.4f}, ratio {spar / glmm:.3f}")
    assert ok


@pytest.mark.slow
def test_desk_b_coverage(desk, verdict):
    cov = desk["summary"][(DESK_SCENARIO, "spar")]["mean_coverage"]
    ok = 85.0 <= cov <= 100.0
    verdict("desk study (b): SPAR coverage in [85, 100]", ok, f"mean coverage {cov:.1f}%")
    assert ok


@pytest.mark.slow
def test_desk_c_linear_confounders(desk, verdict):
    spar = desk["summary"][(LINEARCONF_SCENARIO, "spar")]["median_rmse"]
    glmm = desk["summary"][(LINEARCONF_SCENARIO, "glmm")]["median_rmse"]
    ok = spar <= 1.3 * glmm
    verdict("desk study (c): linear confounders, SPAR median RMSE <= 1.3 x GLMM", ok,
            f"SPAR {spar:.4f}, GLMM {glmm:.4f}, ratio {spar / glmm:.3f}")
    assert ok


@pytest.mark.slow
def test_desk_d_bias(desk, verdict):
    med = {m: desk["summary"][(DESK_SCENARIO, m)]["median_bias"]
           for m in ("spar", "spar1", "glmm")}
    ok = all(abs(v) <= 0.02 for v in med.values())
    verdict("desk study (d): all bias medians within +/-0.02", ok,
            ", ".join(f"{m} {v:+.4f}" for m, v in med.items()))
    assert ok


@pytest.mark.slow
def test_stopping_behaviour(desk, verdict):
    spar = [r for r in desk["rows"] if r.model == "spar"]
    good = [r for r in spar if r.ok and r.converged and r.iterations <= 30
            and r.final_diff < 5e-4]
    iters = sorted(r.iterations for r in spar)
    ok = len(good) == len(spar)
    verdict("stopping behaviour", ok,
            f"{len(good)}/{len(spar)} SPAR fits converged, iterations {iters}")
    assert ok


@pytest.mark.slow
def test_residual_autocorrelation_reduction(desk, verdict):
    spar = [r for r in _rows(desk, DESK_SCENARIO, "spar") if r.ok]
    res = np.array([abs(r.residual_moran) for r in spar])
    raw = np.array([abs(r.raw_moran) for r in spar])
    ok = np.median(res) < 0.5 * np.median(raw)
    signed = np.median([r.residual_moran for r in spar])
    verdict("residual autocorrelation reduction", ok,
            f"median |I| residual {np.median(res):.3f} (signed median {signed:+.3f}) "
            f"vs raw {np.median(raw):.3f}; "
            f"{int(np.sum(res < 0.5 * raw))}/{len(spar)} replicates pass individually")
    assert ok
