"""Command-line entry points: ``fit``, ``simulate``, ``study`` and ``moran``.

Every option can also come from a JSON config file (``--config``) whose
keys are the option names with dashes or underscores. Flags given on the
command line win over the file, which wins over the built-in defaults.

Exit status is 0 on success, 2 on an input error and 3 when ``--strict``
escalates a warning (sampler diagnostics, out-of-bag fallbacks, a SPAR run
that hit its iteration cap, or a failed study row).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .areal import InputError, Dataset, compute_smr, lattice_map, read_dataset, read_map, write_map
from .diagnostics import ALTERNATIVES, moran_permutation_test
from .erf import ErfSpec
from .inference import SamplerConfig
from .simgen import scenario
from .spar import MODEL_LABELS, SparConfig, fit_model
from .study import STUDY_MODELS, replicate_seed, run_study, simulate_replicate, write_study

logger = logging.getLogger("sparforest")

EXIT_OK, EXIT_INPUT, EXIT_WARNING = 0, 2, 3
ERF_CHOICES = {"linear": "linear", "pspline": "pspline_rw2", "berkson": "berkson_linear"}

_SAMPLER_DEFAULTS = {"n_iter": 5000, "burn_in": 5000, "chains": 4, "n_keep": 1000}
_SPAR_DEFAULTS = {"epsilon": 5e-4, "q_samples": 100, "max_iterations": 30,
                  "trees_per_sample": 10, "tuning_trees": 500, "moran_permutations": 999}
DEFAULTS = {
    "fit": {"data": None, "adjacency": None, "centroids": None, "model": "spar",
            "erf": "linear", "exposure": None, "sigma2_x": 0.0, "n_bins": 50, "seed": 0,
            "jobs": 1, "out": "sparforest_out", "strict": False, "no_timestamp": False,
            **_SPAR_DEFAULTS, **_SAMPLER_DEFAULTS},
    "simulate": {"scenario": None, "n": 1, "side": 15, "seed": 0, "jobs": 1,
                 "out": "sparforest_sim", "strict": False, "no_timestamp": False},
    "study": {"scenario": None, "n": 1, "side": 15, "models": "spar,spar1,glmm",
              "erf": "linear", "exposure": "x2", "sigma2_x": 0.0, "n_bins": 50, "seed": 0,
              "jobs": 1, "out": "sparforest_study", "strict": False, "no_timestamp": False,
              **_SPAR_DEFAULTS, **_SAMPLER_DEFAULTS},
    "moran": {"data": None, "column": "smr", "adjacency": None, "centroids": None,
              "n_perm": 10000, "alternative": "greater", "seed": 0, "out": "sparforest_moran",
              "strict": False, "no_timestamp": False},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument handling


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparforest", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        _add(p, "--config", help="JSON file of option values")
        _add(p, "--seed", type=int)
        _add(p, "--out", help="output directory")
        _add(p, "--strict", action="store_true", help="exit 3 on warnings")
        _add(p, "--no-timestamp", action="store_true", help="omit timestamps from outputs")

    def fitting(p):
        _add(p, "--erf", choices=sorted(ERF_CHOICES))
        _add(p, "--exposure", help="exposure column name without the x_ prefix")
        _add(p, "--sigma2-x", type=float, help="Berkson error variance")
        _add(p, "--n-bins", type=int, help="bins of the P-spline ERF")
        _add(p, "--epsilon", type=float)
        _add(p, "--q-samples", type=int)
        _add(p, "--max-iterations", type=int)
        _add(p, "--trees-per-sample", type=int)
        _add(p, "--tuning-trees", type=int)
        _add(p, "--moran-permutations", type=int)
        _add(p, "--n-iter", type=int, help="post burn-in sweeps per chain")
        _add(p, "--burn-in", type=int)
        _add(p, "--chains", type=int)
        _add(p, "--n-keep", type=int, help="retained draws over all chains")
        _add(p, "--jobs", type=int)

    p = sub.add_parser("fit", help="fit one model to a dataset")
    common(p)
    fitting(p)
    _add(p, "--data")
    _add(p, "--adjacency")
    _add(p, "--centroids")
    _add(p, "--model", choices=sorted(MODEL_LABELS))

    p = sub.add_parser("simulate", help="write simulated replicates")
    common(p)
    _add(p, "--scenario")
    _add(p, "--n", type=int, help="number of replicates")
    _add(p, "--side", type=int, help="lattice side length")
    _add(p, "--jobs", type=int)

    p = sub.add_parser("study", help="simulate, fit and score replicates")
    common(p)
    fitting(p)
    _add(p, "--scenario", action="append", help="repeatable")
    _add(p, "--n", type=int, help="replicates per scenario")
    _add(p, "--side", type=int)
    _add(p, "--models", help=f"comma-separated subset of {','.join(STUDY_MODELS)}")

    p = sub.add_parser("moran", help="Moran's I permutation test of one column")
    common(p)
    _add(p, "--data")
    _add(p, "--column", help="a CSV column, or smr / log_smr for a dataset file")
    _add(p, "--adjacency")
    _add(p, "--centroids")
    _add(p, "--n-perm", type=int)
    _add(p, "--alternative", choices=ALTERNATIVES)
    return parser


def resolve_options(command: str, given: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    opts = dict(DEFAULTS[command])
    cfg_path = given.pop("config", None)
    if cfg_path is not None:
        try:
            loaded = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config {cfg_path} must hold a JSON object")
        for key, value in loaded.items():
            k = key.replace("-", "_")
            if k not in opts:
                raise CliError(f"config {cfg_path}: unknown option {key!r} for {command}")
            opts[k] = value
    opts.update(given)
    return opts


def _require(opts, *names):
    missing = [n for n in names if opts.get(n) is None]
    if missing:
        raise CliError("missing required option(s): "
                       + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing(path, label):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{label} file not found: {path}")
    return p


def spar_config(opts) -> SparConfig:
    try:
        sampler = SamplerConfig(n_samples=min(int(opts["q_samples"]), int(opts["n_keep"])),
                                n_iter=int(opts["n_iter"]), burn_in=int(opts["burn_in"]),
                                n_chains=int(opts["chains"]), n_keep=int(opts["n_keep"]))
        return SparConfig(epsilon=float(opts["epsilon"]), q_samples=int(opts["q_samples"]),
                          trees_per_sample=int(opts["trees_per_sample"]),
                          max_iterations=int(opts["max_iterations"]),
                          tuning_trees=int(opts["tuning_trees"]),
                          moran_permutations=int(opts["moran_permutations"]),
                          seed=int(opts["seed"]), sampler=sampler)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid fitting options: {exc}") from None


def erf_spec(opts, exposure_names) -> ErfSpec:
    if not exposure_names:
        raise CliError("the dataset has no exposure (x_) columns")
    name = opts["exposure"]
    if name is None:
        index = 0
    elif name in exposure_names:
        index = list(exposure_names).index(name)
    else:
        raise CliError(f"unknown exposure {name!r}; available: {', '.join(exposure_names)}")
    try:
        return ErfSpec(ERF_CHOICES[opts["erf"]], exposure_index=index, n_bins=int(opts["n_bins"]),
                       sigma2_x=float(opts["sigma2_x"]))
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid ERF options: {exc}") from None


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_fit(opts) -> int:
    _require(opts, "data", "adjacency")
    data = read_dataset(_existing(opts["data"], "data"))
    cent = _existing(opts["centroids"], "centroids") if opts["centroids"] else None
    amap = read_map(_existing(opts["adjacency"], "adjacency"), data.unit_ids, cent)
    spec = erf_spec(opts, data.exposure_names)
    config = spar_config(opts)
    config = replace(config, sampler=replace(config.sampler, n_jobs=int(opts["jobs"])))
    logger.info("fitting %s (%s ERF) on %d units", MODEL_LABELS[opts["model"]], spec.kind,
                data.n_units)
    fit = fit_model(opts["model"], data, amap, spec, config)
    out = _out_dir(opts)
    for path in fit.write_report(out, timestamp=not opts["no_timestamp"]):
        logger.info("wrote %s", path)
    problems = list(fit.warnings)
    if fit.model == "spar" and not fit.converged:
        problems.append(f"SPAR did not converge within {fit.iterations} iterations")
    for msg in problems:
        logger.warning("%s", msg)
    if problems and opts["strict"]:
        return EXIT_WARNING
    return EXIT_OK


def cmd_simulate(opts) -> int:
    _require(opts, "scenario")
    scen = scenario(opts["scenario"])
    n, side, seed = int(opts["n"]), int(opts["side"]), int(opts["seed"])
    if n < 1 or side < 2:
        raise CliError("--n must be at least 1 and --side at least 2")
    amap = lattice_map(side)
    out = _out_dir(opts)
    write_map(out / "adjacency.csv", amap, out / "centroids.csv")
    sims = Parallel(n_jobs=int(opts["jobs"]))(
        delayed(simulate_replicate)(scen.name, r, amap, seed) for r in range(1, n + 1))
    reps = []
    for r, sim in enumerate(sims, start=1):
        data_name, truth_name = f"rep_{r:03d}.csv", f"truth_rep_{r:03d}.csv"
        sim.write(out / data_name, out / truth_name)
        reps.append({"replicate": r, "seed": replicate_seed(seed, r), "data": data_name,
                     "truth": truth_name, "intercept": sim.intercept})
    params = asdict(scen)
    params.pop("seed")
    manifest = {"scenario": scen.name, "number": scen.number, "parameters": params,
                "lattice_side": side, "base_seed": seed, "adjacency": "adjacency.csv",
                "centroids": "centroids.csv", "replicates": reps}
    if not opts["no_timestamp"]:
        manifest["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    logger.info("wrote %d replicate(s) of %s to %s", n, scen.name, out)
    return EXIT_OK


def cmd_study(opts) -> int:
    _require(opts, "scenario")
    names = opts["scenario"]
    names = [names] if isinstance(names, str) else list(names)
    models = [m.strip() for m in str(opts["models"]).split(",") if m.strip()]
    side = int(opts["side"])
    if side < 2:
        raise CliError("--side must be at least 2")
    amap = lattice_map(side)
    spec = erf_spec(opts, ("x1", "x2"))
    rows = run_study(names, int(opts["n"]), models, amap, spec, spar_config(opts),
                     int(opts["seed"]), int(opts["jobs"]))
    out = _out_dir(opts)
    for path in write_study(out, rows):
        logger.info("wrote %s", path)
    failed = [r for r in rows if not r.ok]
    for r in failed:
        logger.warning("%s replicate %d %s: %s", r.scenario, r.replicate, r.model, r.status)
    if failed and opts["strict"]:
        return EXIT_WARNING
    return EXIT_OK


def _read_column(path, column) -> tuple[tuple[str, ...], np.ndarray]:
    """Unit IDs and one numeric column; ``smr`` and ``log_smr`` derive from y and e."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        body = [row for row in reader if row]
    if "unit_id" not in header:
        raise InputError(f"{path}: needs a unit_id column")
    if column in ("smr", "log_smr") and column not in header:
        data: Dataset = read_dataset(path)
        smr = compute_smr(data.y, data.e)
        if column == "log_smr":
            if np.any(data.y == 0):
                raise InputError(f"{path}: log_smr is undefined for zero counts")
            smr = np.log(smr)
        return data.unit_ids, smr
    if column not in header:
        raise InputError(f"{path}: no column {column!r}; columns are {', '.join(header)}")
    ui, ci = header.index("unit_id"), header.index(column)
    ids, vals = [], []
    for line, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        try:
            vals.append(float(row[ci]))
        except ValueError:
            raise InputError(f"{path}: line {line}, column {column!r}: "
                             f"{row[ci]!r} is not a number") from None
        ids.append(row[ui].strip())
    return tuple(ids), np.array(vals)


def cmd_moran(opts) -> int:
    _require(opts, "data", "adjacency")
    ids, values = _read_column(_existing(opts["data"], "data"), opts["column"])
    cent = _existing(opts["centroids"], "centroids") if opts["centroids"] else None
    amap = read_map(_existing(opts["adjacency"], "adjacency"), ids, cent, repair=False)
    try:
        res = moran_permutation_test(values, amap, int(opts["n_perm"]), int(opts["seed"]),
                                     opts["alternative"])
    except ValueError as exc:
        raise CliError(f"{opts['column']}: {exc}") from None
    out = _out_dir(opts)
    with (out / "moran.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "i_stat", "p_value", "n_permutations", "alternative"])
        w.writerow([opts["column"], repr(res.i_stat), repr(res.p_value), res.n_permutations,
                    res.alternative])
    print(f"Moran's I = {res.i_stat:.6f}, p = {res.p_value:.6g} "
          f"({res.alternative}, {res.n_permutations} permutations)")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "study": cmd_study, "moran": cmd_moran}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    quiet = args.pop("quiet")
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        opts = resolve_options(command, args)
        return COMMANDS[command](opts)
    except CliError as exc:
        logger.error("%s", exc)
        return exc.code
    except (InputError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
