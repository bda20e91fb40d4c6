"""Replicated simulation studies: generate, fit, score against the truth."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .areal import ArealMap, InputError, lattice_map
from .diagnostics import erf_accuracy, morans_i
from .erf import ErfSpec
from .forest import sample_seed
from .simgen import SCENARIOS, SimulatedDataset, generate, scenario
from .spar import SparConfig, adjusted_responses, fit_model
from .spatial import scaled_icar

logger = logging.getLogger(__name__)

STUDY_MODELS = ("spar", "spar1", "glmm", "oracle")
LONG_COLUMNS = ("scenario", "model", "replicate", "bias", "rmse", "coverage", "miw", "status")
DETAIL_COLUMNS = ("scenario", "model", "replicate", "iterations", "converged", "final_diff",
                  "residual_moran", "raw_moran", "seconds")
SUMMARY_COLUMNS = ("scenario", "model", "n_ok", "n_failed", "median_bias", "median_rmse",
                   "mean_rmse", "median_coverage", "mean_coverage", "mean_miw")


@dataclass
class StudyRow:
    scenario: str
    model: str
    replicate: int
    bias: float = float("nan")
    rmse: float = float("nan")
    coverage: float = float("nan")
    miw: float = float("nan")
    status: str = "ok"
    iterations: int = 0
    converged: bool = False
    final_diff: float = float("nan")
    residual_moran: float = float("nan")
    raw_moran: float = float("nan")
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def replicate_seed(seed: int, replicate: int) -> int:
    """Seed of one replicate; replicate indices start at 1."""
    return sample_seed(seed, replicate)


def simulate_replicate(name: str, replicate: int, amap: ArealMap, seed: int = 0,
                       **overrides) -> SimulatedDataset:
    return generate(scenario(name, seed=replicate_seed(seed, replicate), **overrides), amap)


def _truth_and_estimate(sim: SimulatedDataset, fit, erf_spec: ErfSpec):
    """Target-exposure truth plus posterior mean and 95% band at each unit.

    RW2 curves are identified only up to a constant, so for that ERF both
    the truth and the estimate are centred at their unit means.
    """
    truth = sim.g_true[:, erf_spec.exposure_index]
    post = fit.erf_units
    draws = post.samples
    if erf_spec.kind == "pspline_rw2":
        truth = truth - truth.mean()
        draws = draws - draws.mean(axis=1, keepdims=True)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    mean = draws.mean(axis=0)
    return truth, mean, np.minimum(lo, mean), np.maximum(hi, mean)


def _raw_moran(sim: SimulatedDataset, amap: ArealMap, offset: float) -> float:
    try:
        return morans_i(adjusted_responses(sim.dataset, None, offset)[0], amap)
    except InputError:
        return float("nan")


def run_replicate(name: str, replicate: int, models: Sequence[str], amap: ArealMap,
                  erf_spec: ErfSpec, config: SparConfig, seed: int = 0,
                  precision=None) -> list[StudyRow]:
    """Fit every model on one replicate. A failing model yields a flagged row."""
    sim = simulate_replicate(name, replicate, amap, seed)
    rseed = replicate_seed(seed, replicate)
    cfg = replace(config, seed=rseed)
    raw = _raw_moran(sim, amap, config.zero_count_offset)
    rows = []
    for model in models:
        row = StudyRow(name, model, replicate, raw_moran=raw)
        start = time.perf_counter()
        if model == "oracle":
            truth = sim.g_true[:, erf_spec.exposure_index]
            acc = erf_accuracy(truth, truth, truth, truth)
            row.bias, row.rmse, row.coverage, row.miw = acc.bias, acc.rmse, acc.coverage, acc.miw
            row.iterations, row.converged, row.final_diff = 0, True, 0.0
        else:
            try:
                fit = fit_model(model, sim.dataset, amap, erf_spec, cfg, precision)
                acc = erf_accuracy(*_truth_and_estimate(sim, fit, erf_spec))
                row.bias, row.rmse, row.coverage, row.miw = (acc.bias, acc.rmse, acc.coverage,
                                                             acc.miw)
                row.iterations, row.converged = fit.iterations, fit.converged
                row.final_diff = fit.erf_trace[-1]
                row.residual_moran = fit.metrics["moran_i"]
            except (InputError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                row.status = f"failed: {type(exc).__name__}: {exc}"
                logger.warning("%s replicate %d model %s failed: %s", name, replicate, model, exc)
        row.seconds = time.perf_counter() - start
        logger.info("%s replicate %d %s: rmse=%.4g coverage=%.1f (%.1fs)", name, replicate,
                    model, row.rmse, row.coverage, row.seconds)
        rows.append(row)
    return rows


def run_study(names: Sequence[str], n_replicates: int, models: Sequence[str] = ("spar", "glmm"),
              amap: ArealMap | None = None, erf_spec: ErfSpec | None = None,
              config: SparConfig | None = None, seed: int = 0, n_jobs: int = 1) -> list[StudyRow]:
    """Run a study; rows come back ordered by scenario, replicate, then model."""
    for n in names:
        if n not in SCENARIOS:
            raise InputError(f"unknown scenario {n!r}; valid names: {', '.join(SCENARIOS)}")
    bad = [m for m in models if m not in STUDY_MODELS]
    if bad:
        raise InputError(f"unknown model(s) {bad}; choose from {list(STUDY_MODELS)}")
    if n_replicates < 1:
        raise InputError("the number of replicates must be at least 1")
    amap = amap or lattice_map(15)
    erf_spec = erf_spec or ErfSpec("linear", exposure_index=1)
    config = config or SparConfig()
    precision = scaled_icar(amap)
    tasks = [(n, r) for n in names for r in range(1, n_replicates + 1)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_replicate)(n, r, models, amap, erf_spec, config, seed, precision)
        for n, r in tasks)
    return [row for rows in results for row in rows]


# ---------------------------------------------------------------------------
# tables


def summarize(rows: Sequence[StudyRow]) -> list[dict]:
    """Medians and means of the scores per scenario and model, failures excluded."""
    groups: dict[tuple[str, str], list[StudyRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.model), []).append(r)
    out = []
    for (scen, model), grp in groups.items():
        ok = [r for r in grp if r.ok]
        vals = {k: np.array([getattr(r, k) for r in ok], dtype=float)
                for k in ("bias", "rmse", "coverage", "miw")}

        def stat(fn, key):
            return float(fn(vals[key])) if ok else float("nan")

        out.append({"scenario": scen, "model": model, "n_ok": len(ok),
                    "n_failed": len(grp) - len(ok),
                    "median_bias": stat(np.median, "bias"), "median_rmse": stat(np.median, "rmse"),
                    "mean_rmse": stat(np.mean, "rmse"),
                    "median_coverage": stat(np.median, "coverage"),
                    "mean_coverage": stat(np.mean, "coverage"), "mean_miw": stat(np.mean, "miw")})
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path: Path, columns, records) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in columns])


def write_study(out_dir, rows: Sequence[StudyRow]) -> list[Path]:
    """``study_results.csv`` (long), ``study_details.csv`` and ``study_summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = [asdict(r) for r in rows]
    paths = [out / "study_results.csv", out / "study_details.csv", out / "study_summary.csv"]
    _write(paths[0], LONG_COLUMNS, recs)
    _write(paths[1], DETAIL_COLUMNS, recs)
    _write(paths[2], SUMMARY_COLUMNS, summarize(rows))
    return paths


def read_study(path) -> list[StudyRow]:
    """Read a long results CSV back into rows (detail fields left at defaults)."""
    types = {f.name: f.type for f in fields(StudyRow)}
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for k, v in rec.items():
                if types[k] in ("float", float):
                    kw[k] = float(v)
                elif types[k] in ("int", int):
                    kw[k] = int(v)
                else:
                    kw[k] = v
            rows.append(StudyRow(**kw))
    return rows
