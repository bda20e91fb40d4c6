import csv
import json
import statistics

import numpy as np
import pytest

from sparforest import study
from sparforest.areal import lattice_map, write_map
from sparforest.cli import DEFAULTS, main, resolve_options
from sparforest.erf import ErfSpec
from sparforest.simgen import SCENARIOS

FAST = ["--n-iter", "200", "--burn-in", "200", "--chains", "2", "--n-keep", "100",
        "--q-samples", "20", "--tuning-trees", "30", "--moran-permutations", "99",
        "--no-timestamp"]
REPORT_FILES = ("fit_report.txt", "erf_curve.csv", "phi_map.csv", "posterior_samples.csv",
                "metrics.csv")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = main(["-q", "simulate", "--scenario", "common-linear-good", "--n", "1", "--side", "5",
                 "--seed", "4", "--out", str(out), "--no-timestamp"])
    assert code == 0
    return out


def fit_args(simdir, out, *extra):
    return (["-q", "fit", "--data", str(simdir / "rep_001.csv"),
             "--adjacency", str(simdir / "adjacency.csv"),
             "--centroids", str(simdir / "centroids.csv"), "--exposure", "x2", "--seed", "3",
             "--out", str(out)] + FAST + list(extra))


# -- simulate ----------------------------------------------------------------

def test_simulate_writes_pairs_and_manifest(tmp_path):
    out = tmp_path / "s"
    assert main(["-q", "simulate", "--scenario", "rare-linear-good", "--n", "5", "--side", "6",
                 "--out", str(out)]) == 0
    for r in range(1, 6):
        assert (out / f"rep_{r:03d}.csv").is_file() and (out / f"truth_rep_{r:03d}.csv").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"] == "rare-linear-good"
    assert [r["replicate"] for r in manifest["replicates"]] == [1, 2, 3, 4, 5]
    assert len({r["seed"] for r in manifest["replicates"]}) == 5
    assert "created" in manifest
    e = np.array([float(row["e"]) for row in read_csv(out / "rep_003.csv")])
    assert e.min() >= 10 and e.max() <= 25


def test_simulate_is_byte_identical_for_a_seed(tmp_path):
    args = ["-q", "simulate", "--scenario", "common-sigmoidal-poor", "--n", "2", "--side", "5",
            "--seed", "11", "--no-timestamp"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_simulate_invalid_scenario_lists_names(tmp_path, capsys):
    assert main(["simulate", "--scenario", "medium-linear-good", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    for name in SCENARIOS:
        assert name in err


def test_simulate_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["-q", "simulate", "--scenario", "rare-linear-good", "--side", "4",
                 "--out", str(blocker / "sub")]) == 2


# -- fit ---------------------------------------------------------------------

def test_fit_glmm_smoke(simdir, tmp_path):
    assert main(fit_args(simdir, tmp_path / "g", "--model", "glmm")) == 0
    for name in REPORT_FILES + ("trace.csv",):
        assert (tmp_path / "g" / name).is_file()
    rows = read_csv(tmp_path / "g" / "metrics.csv")
    assert rows[0]["model"] == "GLMM"
    assert set(rows[0]) >= {"d_bar", "d_at_mean", "waic", "p_w", "moran_i"}


def test_fit_deterministic_without_timestamp(simdir, tmp_path):
    for d in ("a", "b"):
        assert main(fit_args(simdir, tmp_path / d, "--model", "spar1")) == 0
    for name in REPORT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_unknown_unit_id(simdir, tmp_path, capsys):
    adj = tmp_path / "adj.csv"
    adj.write_text((simdir / "adjacency.csv").read_text() + "u0000,zz99\n")
    args = fit_args(simdir, tmp_path / "o", "--model", "glmm")
    args[args.index("--adjacency") + 1] = str(adj)
    assert main(args) == 2
    assert "zz99" in capsys.readouterr().err


def test_fit_malformed_csv(simdir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    lines = (simdir / "rep_001.csv").read_text().splitlines()
    lines[3] = lines[3].replace(",", ",oops,", 1)
    bad.write_text("\n".join(lines) + "\n")
    args = fit_args(simdir, tmp_path / "o", "--model", "glmm")
    args[args.index("--data") + 1] = str(bad)
    assert main(args) == 2
    assert "line 4" in capsys.readouterr().err


def test_fit_missing_file_and_option(simdir, tmp_path):
    args = fit_args(simdir, tmp_path / "o", "--model", "glmm")
    args[args.index("--data") + 1] = str(tmp_path / "absent.csv")
    assert main(args) == 2
    assert main(["-q", "fit", "--adjacency", str(simdir / "adjacency.csv")]) == 2


def test_fit_berkson_zero_variance_equals_linear(simdir, tmp_path):
    common = ("--model", "spar", "--max-iterations", "2")
    assert main(fit_args(simdir, tmp_path / "lin", *common, "--erf", "linear")) == 0
    assert main(fit_args(simdir, tmp_path / "ber", *common, "--erf", "berkson",
                         "--sigma2-x", "0")) == 0
    for name in REPORT_FILES[1:] + ("trace.csv",):
        assert (tmp_path / "lin" / name).read_bytes() == (tmp_path / "ber" / name).read_bytes()


def test_fit_strict_escalates_nonconvergence(simdir, tmp_path):
    extra = ("--model", "spar", "--max-iterations", "1", "--epsilon", "1e-12")
    assert main(fit_args(simdir, tmp_path / "a", *extra)) == 0
    assert main(fit_args(simdir, tmp_path / "b", *extra, "--strict")) == 3
    assert (tmp_path / "b" / "metrics.csv").is_file()


def test_config_file_and_flag_precedence(simdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "glmm", "n-iter": 150, "seed": 9}))
    opts = resolve_options("fit", {"config": str(cfg), "seed": 2})
    assert opts["model"] == "glmm" and opts["n_iter"] == 150 and opts["seed"] == 2
    assert opts["epsilon"] == DEFAULTS["fit"]["epsilon"]
    # the run itself picks the model from the file
    assert main(fit_args(simdir, tmp_path / "o", "--config", str(cfg))) == 0
    assert read_csv(tmp_path / "o" / "metrics.csv")[0]["model"] == "GLMM"
    cfg.write_text(json.dumps({"modle": "glmm"}))
    assert main(fit_args(simdir, tmp_path / "o", "--config", str(cfg))) == 2


# -- moran -------------------------------------------------------------------

def checkerboard(tmp_path, values):
    amap = lattice_map(2)
    write_map(tmp_path / "adj.csv", amap)
    with open(tmp_path / "vals.csv", "w") as fh:
        fh.write("unit_id,v\n")
        for uid, v in zip(amap.unit_ids, values):
            fh.write(f"{uid},{v}\n")


def test_moran_checkerboard(tmp_path, capsys):
    checkerboard(tmp_path, [1, -1, -1, 1])
    assert main(["-q", "moran", "--data", str(tmp_path / "vals.csv"), "--column", "v",
                 "--adjacency", str(tmp_path / "adj.csv"), "--out", str(tmp_path / "m")]) == 0
    row = read_csv(tmp_path / "m" / "moran.csv")[0]
    assert float(row["i_stat"]) == -1.0
    assert int(row["n_permutations"]) == 10000
    assert "Moran's I = -1.000000" in capsys.readouterr().out


def test_moran_constant_column(tmp_path):
    checkerboard(tmp_path, [2, 2, 2, 2])
    assert main(["-q", "moran", "--data", str(tmp_path / "vals.csv"), "--column", "v",
                 "--adjacency", str(tmp_path / "adj.csv"), "--out", str(tmp_path / "m")]) == 2
    assert main(["-q", "moran", "--data", str(tmp_path / "vals.csv"), "--column", "w",
                 "--adjacency", str(tmp_path / "adj.csv"), "--out", str(tmp_path / "m")]) == 2


def test_moran_dataset_smr(simdir, tmp_path):
    assert main(["-q", "moran", "--data", str(simdir / "rep_001.csv"), "--adjacency",
                 str(simdir / "adjacency.csv"), "--n-perm", "99", "--out", str(tmp_path)]) == 0
    row = read_csv(tmp_path / "moran.csv")[0]
    assert row["column"] == "smr" and int(row["n_permutations"]) == 99


# -- study -------------------------------------------------------------------

STUDY_FAST = [a for a in FAST if a != "--no-timestamp"]


def test_study_rows_oracle_and_summary(tmp_path):
    out = tmp_path / "st"
    assert main(["-q", "study", "--scenario", "common-linear-good", "--n", "2", "--side", "5",
                 "--models", "oracle,glmm", "--jobs", "2", "--out", str(out)] + STUDY_FAST) == 0
    rows = read_csv(out / "study_results.csv")
    assert list(rows[0])[:7] == ["scenario", "model", "replicate", "bias", "rmse", "coverage",
                                 "miw"]
    assert len(rows) == 4
    assert [(r["replicate"], r["model"]) for r in rows] == [
        ("1", "oracle"), ("1", "glmm"), ("2", "oracle"), ("2", "glmm")]
    assert all(float(r["rmse"]) == 0.0 for r in rows if r["model"] == "oracle")
    assert all(r["status"] == "ok" for r in rows)
    summary = {r["model"]: r for r in read_csv(out / "study_summary.csv")}
    for model in ("oracle", "glmm"):
        mine = [r for r in rows if r["model"] == model]
        for col in ("bias", "rmse"):
            want = statistics.median(float(r[col]) for r in mine)
            assert float(summary[model][f"median_{col}"]) == pytest.approx(want, abs=1e-15)
        for col in ("coverage", "miw"):
            want = statistics.fmean(float(r[col]) for r in mine)
            assert float(summary[model][f"mean_{col}"]) == pytest.approx(want, abs=1e-12)


def test_study_failure_rows_are_flagged(tmp_path, monkeypatch):
    real = study.fit_model

    def flaky(model, data, *a, **k):
        if model == "glmm":
            raise FloatingPointError("boom")
        return real(model, data, *a, **k)

    monkeypatch.setattr(study, "fit_model", flaky)
    rows = study.run_study(["rare-linear-good"], 1, ("oracle", "glmm"), lattice_map(4),
                           ErfSpec("linear", exposure_index=1))
    assert rows[0].ok and not rows[1].ok and "boom" in rows[1].status
    study.write_study(tmp_path, rows)
    flagged = read_csv(tmp_path / "study_results.csv")
    assert flagged[1]["status"].startswith("failed")
    summary = read_csv(tmp_path / "study_summary.csv")
    assert summary[1]["n_failed"] == "1" and summary[1]["median_rmse"] == "nan"
    assert main(["-q", "study", "--scenario", "rare-linear-good", "--side", "4",
                 "--models", "glmm", "--strict", "--out", str(tmp_path / "x")] + STUDY_FAST) == 3


def test_study_input_errors(tmp_path):
    assert main(["-q", "study", "--scenario", "nope", "--out", str(tmp_path)]) == 2
    assert main(["-q", "study", "--scenario", "rare-linear-good", "--models", "spar,lasso",
                 "--out", str(tmp_path)]) == 2


def test_study_roundtrip(tmp_path):
    rows = study.run_study(["rare-linear-good"], 2, ("oracle",), lattice_map(4))
    study.write_study(tmp_path, rows)
    back = study.read_study(tmp_path / "study_results.csv")
    assert [(r.model, r.replicate, r.rmse, r.status) for r in back] == [
        (r.model, r.replicate, r.rmse, r.status) for r in rows]
