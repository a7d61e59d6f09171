import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from click.testing import CliRunner

from kanepoc.cli import main
from kanepoc.network import estimate_from_dict
from kanepoc.simulation import unit_grid


def run(*args, code=0):
    result = CliRunner().invoke(main, [str(a) for a in args])
    assert result.exit_code == code, result.output
    return result


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def schema(name):
    return json.loads(resources.files("kanepoc").joinpath("schemas", name).read_text())


@pytest.fixture(scope="module")
def a1(tmp_path_factory):
    out = tmp_path_factory.mktemp("a1")
    run("simulate", "--scenario", "A1", "--n", 10000, "--seed", 7, "--out", out)
    return out


@pytest.fixture(scope="module")
def a1_model(a1, tmp_path_factory):
    out = tmp_path_factory.mktemp("a1fit")
    run("fit", "--data", a1 / "data.csv", "--unit-features", "--max-iter", 30, "--out", out)
    return out


def test_simulate_shapes(a1):
    header, rows = read_csv(a1 / "data.csv")
    assert header == ["x1", "y", "delta"] and len(rows) == 10000
    assert sum(r[2] != "" for r in rows) == 500
    header, rows = read_csv(a1 / "truth_grid.csv")
    assert header == ["x1", "truth"] and len(rows) == 1001
    jsonschema.validate(json.loads((a1 / "mapping.json").read_text()), schema("mapping.schema.json"))


def test_simulate_is_byte_identical(a1, tmp_path):
    run("simulate", "--scenario", "A1", "--n", 10000, "--seed", 7, "--out", tmp_path)
    for name in ("data.csv", "truth_grid.csv", "mapping.json"):
        assert (tmp_path / name).read_bytes() == (a1 / name).read_bytes()


def test_simulate_full_precision(a1):
    _, rows = read_csv(a1 / "truth_grid.csv")
    from kanepoc.simulation import true_poc

    truth = true_poc("A1", unit_grid(1))
    assert [float(r[1]) for r in rows] == truth.tolist()


def test_simulate_scenario_c_one_hot(tmp_path):
    run("simulate", "--scenario", "C", "--n", 2000, "--seed", 1, "--out", tmp_path)
    header, rows = read_csv(tmp_path / "data.csv")
    assert header == ["x1", "x2", "y", "delta_1", "delta_2", "delta_3"]
    flagged = [r for r in rows if r[3] != ""]
    assert len(flagged) == 100
    assert all(sorted(r[3:]) == ["0", "0", "1"] for r in flagged)
    assert all(r[3:] == ["", "", ""] for r in rows if r[3] == "")


def test_simulate_errors(tmp_path):
    run("simulate", "--scenario", "Z9", "--out", tmp_path, code=2)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    run("simulate", "--scenario", "A1", "--n", 100, "--out", blocker / "sub", code=1)


def test_fit_writes_model_report_and_manifest(a1_model):
    report = json.loads((a1_model / "report.json").read_text())
    assert report["iterations"] <= 30
    model = json.loads((a1_model / "model.json").read_text())
    jsonschema.validate(model, schema("model.schema.json"))
    manifest = json.loads((a1_model / "manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["n_retained"] == 500
    assert set(manifest["outputs"]) == {"model.json", "report.json"}
    jsonschema.validate(manifest["config"]["fit"], schema("fit_config.schema.json"))


def test_fit_default_cap_is_one_hundred(a1, tmp_path):
    run("fit", "--data", a1 / "data.csv", "--out", tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["iterations"] <= 100
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["fit"]["max_iterations"] == 100


def test_fit_is_byte_identical(a1, a1_model, tmp_path):
    run("fit", "--data", a1 / "data.csv", "--unit-features", "--max-iter", 30, "--out", tmp_path)
    assert (tmp_path / "model.json").read_bytes() == (a1_model / "model.json").read_bytes()


def test_fit_usage_and_runtime_errors(a1, tmp_path):
    run("fit", "--data", a1 / "data.csv", "--g-layer", "bogus", "--out", tmp_path, code=2)
    run("fit", "--data", a1 / "data.csv", "--g-layer", "softmax", "--out", tmp_path, code=2)
    small = tmp_path / "small"
    run("simulate", "--scenario", "A1", "--n", 200, "--out", small)
    result = run("fit", "--data", small / "data.csv", "--out", tmp_path / "f", code=1)
    assert "exceedances" in result.output


def test_fit_ordinal_five_levels(tmp_path):
    rng = np.random.default_rng(0)
    n = 3000
    X = rng.random((n, 2))
    y = rng.random(n)
    levels = rng.integers(1, 6, n)
    path = tmp_path / "ord.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "y", "level"])
        w.writerows([*X[i], y[i], levels[i]] for i in range(n))
    mapping = tmp_path / "map.json"
    mapping.write_text(json.dumps({"features": ["a", "b"], "trigger": "y", "followup": "level",
                                   "kind": "ordinal", "categories": 5}))
    run("fit", "--data", path, "--mapping", mapping, "--quantile", 0.9, "--max-iter", 5, "--out", tmp_path / "m")
    doc = json.loads((tmp_path / "m" / "model.json").read_text())
    assert len(doc["submodels"]) == 4
    jsonschema.validate(doc, schema("model.schema.json"))
    run("predict", "--model", tmp_path / "m" / "model.json", "--grid", 5, "--out", tmp_path / "p.csv")
    header, rows = read_csv(tmp_path / "p.csv")
    assert header[-5:] == [f"alpha_{j}" for j in range(1, 6)]
    sums = [sum(float(v) for v in r[2:]) for r in rows]
    assert max(abs(s - 1) for s in sums) <= 1e-12


def test_predict_grid_matches_forward_batch(tmp_path):
    sim = tmp_path / "sim"
    run("simulate", "--scenario", "B2", "--n", 4000, "--seed", 2, "--out", sim)
    run("fit", "--data", sim / "data.csv", "--unit-features", "--max-iter", 10, "--out", tmp_path / "m")
    out = tmp_path / "surface.csv"
    run("predict", "--model", tmp_path / "m" / "model.json", "--grid", 101, "--out", out)
    header, rows = read_csv(out)
    assert header == ["x1", "x2", "alpha"] and len(rows) == 10201
    alpha = np.array([float(r[2]) for r in rows])
    assert alpha.min() >= 0 and alpha.max() <= 1
    est = estimate_from_dict(json.loads((tmp_path / "m" / "model.json").read_text()))
    np.testing.assert_array_equal(alpha, est.network.forward_batch(unit_grid(2, 101))[:, 0])


def test_predict_points_and_dimension_mismatch(a1_model, tmp_path):
    pts = tmp_path / "pts.csv"
    pts.write_text("x\n0.25\n0.75\n")
    run("predict", "--model", a1_model / "model.json", "--points", pts, "--out", tmp_path / "o.csv")
    _, rows = read_csv(tmp_path / "o.csv")
    est = estimate_from_dict(json.loads((a1_model / "model.json").read_text()))
    assert [float(r[1]) for r in rows] == est.predict(np.array([[0.25], [0.75]]))[:, 0].tolist()
    bad = tmp_path / "bad.csv"
    bad.write_text("x,z\n0.1,0.2\n")
    run("predict", "--model", a1_model / "model.json", "--points", bad, "--out", tmp_path / "b.csv", code=1)
    run("predict", "--model", a1_model / "model.json", "--out", tmp_path / "c.csv", code=2)


def test_diagnose_outputs(a1, a1_model, tmp_path):
    args = ("diagnose", "--model", a1_model / "model.json", "--data", a1 / "data.csv", "--seed", 3)
    run(*args, "--out", tmp_path / "one")
    header, rows = read_csv(tmp_path / "one" / "residuals.csv")
    assert header == ["trajectory", "index", "residual"] and len(rows) == 10 * 500
    header, rows = read_csv(tmp_path / "one" / "qq.csv")
    assert header == ["trajectory", "rank", "residual", "theoretical", "band_lo", "band_hi"]
    assert len(rows) == 5000
    assert all(float(r[4]) <= float(r[3]) <= float(r[5]) for r in rows)
    run(*args, "--out", tmp_path / "two")
    for name in ("residuals.csv", "qq.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    run(*args, "-T", 2, "--out", tmp_path / "three")
    assert len(read_csv(tmp_path / "three" / "residuals.csv")[1]) == 1000


def test_bootstrap_command(tmp_path):
    sim = tmp_path / "sim"
    run("simulate", "--scenario", "A2", "--n", 2000, "--seed", 4, "--out", sim)
    run("bootstrap", "--data", sim / "data.csv", "-B", 50, "--max-iter", 5, "--grid", 11,
        "--unit-features", "--out", tmp_path / "b")
    header, rows = read_csv(tmp_path / "b" / "band.csv")
    assert header == ["x1", "lo", "point", "hi"] and len(rows) == 11
    assert all(float(r[1]) <= float(r[3]) for r in rows)
    run("bootstrap", "--data", sim / "data.csv", "-B", 20, "--out", tmp_path / "c", code=2)


def test_study_single_replicate_and_resumption(tmp_path):
    args = ("study", "--scenarios", "A1", "--sizes", "2000,4000", "-M", 1, "--max-iter", 10, "--seed", 5)
    run(*args, "--out", tmp_path / "s")
    table = (tmp_path / "s" / "table.txt").read_bytes()
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert set(summary) == {"A1/2000", "A1/4000"}
    assert summary["A1/2000"]["replicates"] == 1
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest["reused_replicates"] == 0 and manifest["seeds"] == {"base_seed": 5}
    _, reps = read_csv(tmp_path / "s" / "replicates_A1_n2000.csv")
    assert len(reps) == 1 and reps[0][1] == "5"

    run(*args, "--out", tmp_path / "s")
    assert json.loads((tmp_path / "s" / "manifest.json").read_text())["reused_replicates"] == 2
    assert (tmp_path / "s" / "table.txt").read_bytes() == table

    # a fresh directory recomputes and still produces the same bytes
    run(*args, "--out", tmp_path / "fresh")
    for name in ("table.txt", "table.csv", "summary.json", "replicates_A1_n4000.csv", "surface_A1_n4000.csv"):
        assert (tmp_path / "fresh" / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_study_changed_config_does_not_reuse(tmp_path):
    base = ("study", "--scenarios", "A2", "--sizes", "2000", "-M", 1, "--out", tmp_path)
    run(*base, "--max-iter", 5)
    run(*base, "--max-iter", 6)
    assert json.loads((tmp_path / "manifest.json").read_text())["reused_replicates"] == 0


def test_study_bad_arguments(tmp_path):
    run("study", "--scenarios", "Q1", "--out", tmp_path, code=2)
    run("study", "--sizes", "ten", "--out", tmp_path, code=2)


def test_version_and_help():
    assert "kanepoc" in run("--version").output
    for cmd in ("simulate", "fit", "predict", "diagnose", "bootstrap", "study"):
        assert "--out" in run(cmd, "--help").output
