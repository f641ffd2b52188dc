import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from cassm.baselines import load_model, save_model
from cassm.cli import ExperimentConfig, _jsonable, main

DOCS = Path(__file__).resolve().parents[1] / "docs"

SMALL = {
    "protocol": {"n_decays": 8, "n_calibration": 2, "calibration_steps": 200, "total_s": 3.0},
    "closedloop": [{"shape": "figure-eight", "fraction": 0.5, "omega": 0.5, "duration": 2.0},
                   {"shape": "figure-eight", "fraction": 0.5, "omega": 1.0, "duration": 2.0}],
}


def _config(tmp, **over):
    d = json.loads(json.dumps(SMALL))
    d.update(over)
    path = Path(tmp) / "config.json"
    path.write_text(json.dumps(d))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    out = root / "out"
    codes = [main(["--config", cfg, "--out", str(out), cmd]) for cmd in ("collect", "fit")]
    return root, cfg, out, codes


def _schema(name):
    return json.loads((DOCS / name).read_text())


def test_default_config_matches_schema():
    schema = _schema("config.schema.json")
    jsonschema.Draft202012Validator.check_schema(schema)
    jsonschema.validate(_jsonable(ExperimentConfig().to_dict()), schema)
    jsonschema.validate(SMALL, schema)


def test_collect_writes_trajectories_and_manifest(workspace):
    _, _, out, codes = workspace
    assert codes[0] == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["files"]) == 10
    assert [e["group"] for e in manifest["files"]].count("decay") == 8
    assert all(e["seed"] is not None for e in manifest["files"])
    assert len(list((out / "data").glob("*.csv"))) == 10


def test_collect_rerun_is_byte_identical(workspace, tmp_path):
    _, cfg, out, _ = workspace
    assert main(["--config", cfg, "--out", str(tmp_path), "collect"]) == 0
    for f in sorted((out / "data").iterdir()):
        assert (tmp_path / "data" / f.name).read_bytes() == f.read_bytes()


def test_collect_empty_manifest(tmp_path, capsys):
    cfg = _config(tmp_path, protocol={"n_decays": 0, "n_calibration": 0})
    code, _, _ = _run(capsys, "--config", cfg, "--out", str(tmp_path / "o"), "collect")
    assert code == 0
    assert json.loads((tmp_path / "o" / "data" / "manifest.json").read_text())["files"] == []


def test_fit_report(workspace):
    _, _, out, codes = workspace
    assert codes[1] == 0
    report = json.loads((out / "models" / "fit_report.json").read_text())
    jsonschema.validate(report, _schema("fit_report.schema.json"))
    ca = next(r for r in report["models"] if r["kind"] == "cassm")
    assert len(ca["eig_lambda_hat"]) == len(ca["eig_lambda_true"]) == 2
    assert report["config_hash"] == ExperimentConfig.from_dict(SMALL).hash()
    for kind in ("cassm", "ossm", "koopman"):
        assert (out / "models" / f"{kind}.json").exists()


def test_fit_failure_keeps_other_models(workspace, tmp_path, capsys):
    _, _, out, _ = workspace
    cfg = _config(tmp_path, models=[{"kind": "cassm", "params": {"n_components": 1}},
                                    {"kind": "ossm", "params": {}}])
    code, stdout, _ = _run(capsys, "--config", cfg, "--out", str(tmp_path), "fit",
                           "--data", str(out / "data"))
    assert code == 1
    assert "n_components" in stdout
    assert (tmp_path / "models" / "ossm.json").exists()
    assert not (tmp_path / "models" / "cassm.json").exists()
    report = json.loads((tmp_path / "models" / "fit_report.json").read_text())
    jsonschema.validate(report, _schema("fit_report.schema.json"))


def test_predict_summary_and_determinism(workspace, capsys):
    _, cfg, out, _ = workspace
    code, stdout, _ = _run(capsys, "--config", cfg, "--out", str(out), "--json", "predict")
    assert code == 0
    report = json.loads(stdout)
    assert {r["model"] for r in report["summary"]} == {"cassm", "ossm", "koopman"}
    rows = (out / "predict" / "segments.csv").read_text().splitlines()[1:]
    assert len(rows) == 3 * report["n_segments"] and report["n_segments"] >= 29
    header = (out / "predict" / "summary.csv").read_text().splitlines()[0]
    assert header == "model,mean_rmse_mm,median_rmse_mm,diverged_segments"
    first = (out / "predict" / "segments.csv").read_bytes()
    assert main(["--config", cfg, "--out", str(out), "predict"]) == 0
    capsys.readouterr()
    assert (out / "predict" / "segments.csv").read_bytes() == first


def test_predict_missing_model(workspace, tmp_path, capsys):
    _, cfg, _, _ = workspace
    code, _, err = _run(capsys, "--config", cfg, "--out", str(tmp_path), "predict",
                        "--models", str(tmp_path / "nope.json"))
    assert code == 2 and "nope.json" in err


def test_track_tags_and_budget(workspace, capsys):
    _, cfg, out, _ = workspace
    code, stdout, _ = _run(capsys, "--config", cfg, "--out", str(out), "--json", "track",
                           "--models", str(out / "models" / "cassm.json"))
    assert code == 0
    runs = json.loads(stdout)["runs"]
    tags = [r["tag"] for r in runs]
    assert len(set(tags)) == 2
    for r in runs:
        assert r["mean_solve_ms"] > 0 and isinstance(r["budget_exceeded"], bool)
        assert (out / "track" / f"{r['tag']}.csv").exists()
        assert r["outcome"] in ("ok", "Diverged")


def test_diagnose_classifications(workspace, tmp_path, capsys):
    _, cfg, out, _ = workspace
    slow = load_model(out / "models" / "cassm.json")
    fast = dataclasses.replace(slow, Lam=-200.0 * np.eye(2))
    save_model(fast, tmp_path / "fast.json")
    code, stdout, _ = _run(capsys, "--config", cfg, "--json", "diagnose",
                           str(out / "models" / "cassm.json"))
    assert code == 0
    rep = json.loads(stdout)
    assert rep["spectral"]["classification"] == "overlapping"
    assert rep["invariance_residual"] >= 0 and set(rep["kernel_check"]) == {"w", "r"}
    code, stdout, _ = _run(capsys, "--config", cfg, "--json", "diagnose", str(tmp_path / "fast.json"))
    assert json.loads(stdout)["spectral"]["classification"] == "separated-fast"


def test_diagnose_corrupt_model(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{")
    code, _, err = _run(capsys, "diagnose", str(p))
    assert code == 2 and "bad.json" in err


def test_config_errors_exit_two(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"models": [{"kind": "transformer"}]}))
    assert _run(capsys, "--config", str(p), "collect")[0] == 2
    p.write_text("not json")
    assert _run(capsys, "--config", str(p), "collect")[0] == 2
    assert _run(capsys, "--config", str(tmp_path / "missing.json"), "collect")[0] == 2


def test_fit_without_data_exits_two(tmp_path, capsys):
    code, _, err = _run(capsys, "--out", str(tmp_path), "fit")
    assert code == 2 and "collect" in err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cassm.cli", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("collect", "fit", "predict", "track", "diagnose"):
        assert cmd in res.stdout
