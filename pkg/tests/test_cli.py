"""The rmflab command line: run, report, validate, manifests and exit codes."""
import json
import math
import subprocess
import sys

import pytest

from rmflab.cli import EXIT_ERROR, EXIT_FAILED, EXIT_OK, main

PLATEAU = {"profile": {"kind": "plateau", "delta": 0.1, "relaxed": True}}
PASSING = {"kind": "gauge_covariance_check", "spec": PLATEAU, "L": [3], "h": 0.25, "R": 3}
# At L=2 the constant-field decay rate is not resolved, so a criterion fails.
FAILING = {"kind": "ground_energy_convergence", "spec": PLATEAU, "L": [2, 4], "h": 0.25,
           "extras": {"constant_L": [2, 3]}}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_run_passing_config(tmp_path, capsys):
    cfg = _write(tmp_path, PASSING)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "7"]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["seed"] == 7 and manifest["passed"] is True
    assert manifest["finished"] is not None and manifest["cells"]
    assert (out / "results.csv").read_text().startswith("experiment,cell,quantity,value,count,sigma,status")
    assert json.loads((out / "summary.json").read_text())["seed"] == 7
    assert "PASS" in capsys.readouterr().out


def test_run_failing_criterion_exits_2(tmp_path):
    cfg = _write(tmp_path, FAILING)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_FAILED
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["passed"] is False


def test_report_reproduces_run(tmp_path, capsys):
    cfg = _write(tmp_path, PASSING)
    out = tmp_path / "run"
    main(["run", "--config", str(cfg), "--out", str(out)])
    first = capsys.readouterr().out
    summary = (out / "summary.json").read_text()
    assert main(["report", str(out / "manifest.json")]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert (out / "summary.json").read_text() == summary
    assert main(["report", str(out)]) == EXIT_OK


def test_report_on_unfinished_run(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "manifest.json").write_text(json.dumps({"config": PASSING, "seed": 0, "out_dir": str(out),
                                                   "status": "running"}))
    assert main(["report", str(out)]) == EXIT_ERROR
    assert "running" in capsys.readouterr().err


def test_report_missing_manifest(tmp_path):
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_ERROR


def test_workers_give_identical_csv(tmp_path):
    cfg = _write(tmp_path, {**PASSING, "R": 4})
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1"])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


@pytest.mark.parametrize("spec_patch, field", [({"rho": math.log(2.0)}, "spec.rho"), ({"K0": 3.0}, "spec.K0")])
def test_config_error_names_field(tmp_path, capsys, spec_patch, field):
    cfg = _write(tmp_path, {**PASSING, "spec": {**PLATEAU, **spec_patch}})
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_ERROR
    assert f"config error: {field}" in capsys.readouterr().err
    assert not out.exists()


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert "config error" in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["validate", "--config", str(path)]) == EXIT_ERROR
    assert "invalid JSON" in capsys.readouterr().err


def test_validate(tmp_path, capsys):
    assert main(["validate", "--config", str(_write(tmp_path, PASSING))]) == EXIT_OK
    assert capsys.readouterr().out.startswith("gauge_covariance_check: valid")


@pytest.mark.parametrize("argv", [[], ["run"], ["run", "--config", "x", "--out", "y", "--seed", "-1"],
                                  ["run", "--config", "x", "--out", "y", "--workers", "0"]])
def test_bad_arguments(argv):
    assert main(argv) == EXIT_ERROR


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, PASSING)
    proc = subprocess.run([sys.executable, "-m", "rmflab.cli", "validate", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
