import json

import numpy as np
import pytest

from chflow import framework as fw
from chflow.calibration import read_diagnostic_csv
from chflow.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main
from chflow.equilibrium import EquilibriumResult
from chflow.stability import RegionMap, StabilityReport


def run(*args):
    return main([str(a) for a in args])


def test_simulate_row_count(tmp_path):
    assert run("simulate", "--scenario", "braess", "--dynamic", "ntp", "--horizon", 60, "--out", tmp_path) == EXIT_OK
    days, flows, costs = fw.read_aggregate_csv(tmp_path / "trajectory.csv")
    assert len(days) == 60 and days[0] == 1 and days[-1] == 60
    assert flows.shape == (60, 3) and costs.shape == (60, 3)
    classes = fw.read_class_csv(tmp_path / "trajectory_classes.csv")
    assert classes.shape == (61, 2, 3)
    assert np.allclose(classes[1:].sum(axis=1), flows)


def test_simulate_start_at_due_is_flat(tmp_path):
    assert run("simulate", "--start-at-due", "--horizon", 30, "--gamma", 1.4, "--out", tmp_path) == EXIT_OK
    _, flows, _ = fw.read_aggregate_csv(tmp_path / "trajectory.csv")
    assert np.abs(flows - flows[0]).max() < 1e-8


def test_simulate_multiple_inits_record_distinct_finals(tmp_path):
    code = run("simulate", "--alpha", 0.3, "--gamma", 1.4, "--inits", 4, "--seed", 5, "--horizon", 400, "--out", tmp_path)
    assert code == EXIT_OK
    summary = json.loads((tmp_path / "simulate_summary.json").read_text())
    finals = np.array([r["final"] for r in summary["runs"]])
    assert finals.shape == (4, 3)
    assert all((tmp_path / f"trajectory_{i}.csv").exists() for i in range(4))
    spread = max(np.abs(a - b).max() for a in finals for b in finals)
    assert spread > 1.0


def test_simulate_divergence_exit_code(tmp_path, monkeypatch, capsys):
    # the bundled dynamics stay on the feasible set, so force the failure
    def boom(*a, **k):
        raise fw.DivergenceError(7, "non-finite flows")

    monkeypatch.setattr(fw, "simulate", boom)
    assert run("simulate", "--horizon", 10, "--out", tmp_path) == EXIT_DIVERGED
    assert "error" in capsys.readouterr().err


def test_config_errors_exit_one(tmp_path, capsys):
    assert run("simulate", "--scenario", tmp_path / "missing.json", "--out", tmp_path) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err
    assert run("simulate", "--alpha", 1.5, "--out", tmp_path) == EXIT_CONFIG
    assert run("simulate", "--k", 7, "--out", tmp_path) == EXIT_CONFIG
    assert run("calibrate", "--data", tmp_path / "none.csv", "--out", tmp_path) == EXIT_CONFIG


def test_equilibrium_command(tmp_path):
    assert run("equilibrium", "--out", tmp_path) == EXIT_OK
    res = EquilibriumResult.read_json(tmp_path / "equilibrium.json")
    assert res.kind == "DUE" and np.allclose(res.aggregate, [268 / 3] * 3, atol=1e-6)
    assert run("equilibrium", "--dynamic", "logit", "--theta", 0.2, "--out", tmp_path) == EXIT_OK
    assert EquilibriumResult.read_json(tmp_path / "equilibrium.json").kind == "SUE"


def test_stability_identity_stub(tmp_path, capsys):
    stub = tmp_path / "eye.json"
    stub.write_text(json.dumps(np.eye(4).tolist()))
    assert run("stability", "--jacobian", stub, "--out", tmp_path) == EXIT_OK
    assert capsys.readouterr().out.strip() == "stable"
    assert StabilityReport.read_json(tmp_path / "stability.json").classification == "stable"


def test_stability_on_scenario(tmp_path):
    assert run("stability", "--gamma", 0.2, "--out", tmp_path) == EXIT_OK
    data = json.loads((tmp_path / "stability.json").read_text())
    assert data["classification"] in ("stable", "asymptotically_stable")


def test_sweep_grid_rows(tmp_path):
    args = ["sweep", "--axis", "gamma:0.1:0.5:0.1", "--axis", "gamma_hat:0.1:0.5:0.1", "--out", tmp_path]
    assert run(*args) == EXIT_OK
    rows = RegionMap.read_csv(tmp_path / "region.csv")
    assert len(rows) == 25
    assert run("sweep", "--axis", "gamma:0.1:0.5:0.1", "--out", tmp_path) == EXIT_CONFIG


def test_calibrate_recovers_generator(tmp_path):
    args = ["calibrate", "--data", "synthetic_braess", "--k-levels", 2, "--gamma-range", "0.28:0.32:0.002",
            "--p0-range", "0.6:0.8:0.01", "--out", tmp_path]
    assert run(*args) == EXIT_OK
    report = json.loads((tmp_path / "calibration.json").read_text())
    (best,) = report["results"]
    assert best["params"]["gamma"] == pytest.approx(0.3, abs=0.002)
    assert best["params"]["p0"] == pytest.approx(0.7, abs=0.01)


def test_diagnose_round_trip(tmp_path):
    assert run("diagnose", "--data", "synthetic_braess", "--out", tmp_path) == EXIT_OK
    rows = read_diagnostic_csv(tmp_path / "diagnostic.csv")
    assert len(rows) > 0 and abs(sum(r.net_flow for r in rows)) < 1e-6 * len(rows)


def test_perturb_command(tmp_path):
    assert run("perturb", "--alpha", 0.3, "--gamma", 0.2, "--horizon", 600, "--out", tmp_path) == EXIT_OK
    data = json.loads((tmp_path / "perturb.json").read_text())
    assert data["verdict"] == "returned_to_equilibrium" and data["eps"] == 0.1
    days, _, _ = fw.read_aggregate_csv(tmp_path / "perturb_trajectory.csv")
    assert days[0] == 0 and days[-1] == 600


def test_no_meta_outputs_are_byte_identical(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run("--no-meta", "simulate", "--seed", 3, "--inits", 2, "--horizon", 20, "--out", out) == EXIT_OK
        assert run("--no-meta", "sweep", "--axis", "gamma:0.1:0.3:0.1", "--axis", "gamma_hat:0.1:0.3:0.1",
                   "--out", out) == EXIT_OK
    for name in ("trajectory_0.csv", "trajectory_1.csv", "trajectory_classes_0.csv", "simulate_summary.json", "region.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert not (outs[0] / "region.csv").read_text().startswith("#")


def test_meta_header_present(tmp_path):
    assert run("simulate", "--horizon", 3, "--seed", 9, "--out", tmp_path) == EXIT_OK
    first = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
    assert first.startswith("# chflow") and "seed=9" in first
