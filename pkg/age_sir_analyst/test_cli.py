import json

import numpy as np
import pandas as pd
import pytest

from age_sir_analyst.cli import run
from age_sir_analyst.conftest import A_PRE, GAMMA_PRE, piecewise_trajectory
from age_sir_analyst.dataio import write_trajectory_csv
from age_sir_analyst.model_core import GroupFractions, ModelParams, iterate_discrete

NETWORK_SCENARIO = {
    "m": 2,
    "group_sizes": [30, 20],
    "gamma": [0.3, 0.4],
    "B": [[1.0, 0.5], [0.5, 1.0]],
    "rho": [[2.0, 1.0], [1.0, 2.0]],
    "initial_infected": [2, 1],
    "t_end": 4,
    "sample_dt": 0.5,
    "seed": 11,
}


def write_scenario(tmp_path, **changes):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({**NETWORK_SCENARIO, **changes}))
    return str(path)


def test_ode_without_infection_is_flat(tmp_path, capsys):
    scenario = write_scenario(tmp_path, initial_infected=[0, 0], t_end=3, sample_dt=1.0)
    assert run(["--out", str(tmp_path / "out"), "ode", "--config", scenario]) == 0
    frame = pd.read_csv(tmp_path / "out" / "ode.csv", float_precision="round_trip")
    assert frame["t"].tolist() == [0.0, 1.0, 2.0, 3.0]
    np.testing.assert_array_equal(frame["s_1"], 0.6)
    np.testing.assert_array_equal(frame["beta_2"], 0.0)
    summary = json.loads(capsys.readouterr().out)
    assert summary["samples"] == 4


def test_simulate_is_reproducible(tmp_path):
    scenario = write_scenario(tmp_path)
    for name in ("a", "b"):
        assert run(["--seed", "5", "--out", str(tmp_path / name), "simulate", "--config", scenario]) == 0
    for output in ("trajectory.csv", "events.csv"):
        assert (tmp_path / "a" / output).read_bytes() == (tmp_path / "b" / output).read_bytes()
    events = pd.read_csv(tmp_path / "a" / "events.csv")
    assert list(events.columns) == ["t", "kind", "node_or_pair", "detail"]


def test_ensemble_writes_three_tables(tmp_path):
    scenario = write_scenario(tmp_path)
    out = tmp_path / "out"
    assert run(["--out", str(out), "ensemble", "--config", scenario, "--runs", "3", "--mode", "dense"]) == 0
    finals = pd.read_csv(out / "ensemble_finals.csv")
    assert finals["seed"].tolist() == [11, 12, 13]
    variance = pd.read_csv(out / "ensemble_variance.csv")
    mean = pd.read_csv(out / "ensemble_mean.csv")
    assert list(variance.columns) == list(mean.columns)
    assert len(mean) == 9


def test_estimate_recovers_one_group_rates(tmp_path, capsys):
    traj = iterate_discrete(ModelParams.for_ode([[2.0]], [1.0]), GroupFractions.build([0.99], [0.01]), 20)
    data = write_trajectory_csv(traj, tmp_path / "data.csv")
    assert run(["--out", str(tmp_path / "out"), "estimate", "--data", data]) == 0
    (estimate,) = json.loads((tmp_path / "out" / "estimates.json").read_text())
    assert estimate["A"][0][0] == pytest.approx(2.0, rel=1e-6)
    assert estimate["gamma"][0] == pytest.approx(1.0, rel=1e-6)
    assert json.loads(capsys.readouterr().out)["fit_mse"] < 1e-16
    assert (tmp_path / "out" / "fitted.csv").exists()


def test_detect_then_estimate(tmp_path, two_group_init):
    data = write_trajectory_csv(piecewise_trajectory(two_group_init, 120, [A_PRE], GAMMA_PRE), tmp_path / "data.csv")
    out = str(tmp_path / "out")
    assert run(["--out", out, "detect-phases", "--data", data, "--min-phase", "10"]) == 0
    phases = json.loads((tmp_path / "out" / "phases.json").read_text())
    assert phases["boundaries"] == []
    assert len(phases["windows"]) == 18
    assert run(["--out", out, "estimate", "--data", data, "--phases", str(tmp_path / "out" / "phases.json")]) == 0


def test_detect_phases_rejects_bad_window(tmp_path, capsys):
    traj = iterate_discrete(ModelParams.for_ode([[2.0]], [1.0]), GroupFractions.build([0.99], [0.01]), 40)
    data = write_trajectory_csv(traj, tmp_path / "data.csv")
    assert run(["--out", str(tmp_path), "detect-phases", "--data", data, "--w", "5", "--dp", "5"]) == 1
    assert "w > dp" in capsys.readouterr().err


def test_preprocess(tmp_path):
    rows = ["date,young,old"] + [f"2020-04-{d:02d},{3 * d},{d}" for d in range(1, 21)]
    (tmp_path / "cases.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "config.json").write_text(json.dumps({"populations": [500, 500]}))
    assert run(["--out", str(tmp_path / "out"), "preprocess", "--data", str(tmp_path / "cases.csv"),
                "--config", str(tmp_path / "config.json"), "--recovery-days", "5",
                "--smoothing-window", "3"]) == 0
    frame = pd.read_csv(tmp_path / "out" / "trajectory.csv")
    assert len(frame) == 20
    np.testing.assert_allclose(frame.drop(columns="t").sum(axis=1), 1.0)
    cases = pd.read_csv(tmp_path / "out" / "new_cases.csv")
    assert list(cases.columns) == ["day", "young", "old"]
    assert len(cases) == 19
    # away from the truncated ends the smoothed daily increments are exact
    np.testing.assert_allclose(cases.loc[2:16, ["young", "old"]], [[3.0, 1.0]] * 15)


def test_malformed_csv_exits_with_one(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("t,s_1,beta_1,r_1\n0,0.9,0.1,0\n1,0.8,x,0.1\n")
    assert run(["--out", str(tmp_path), "estimate", "--data", str(tmp_path / "bad.csv")]) == 1
    assert "bad.csv:3" in capsys.readouterr().err


def test_numerical_failure_exits_with_two(tmp_path, capsys):
    scenario = write_scenario(tmp_path, B=None, rho=None, A=[[100.0, 0.0], [0.0, 100.0]],
                              initial_infected=[3, 2], sample_dt=1.0)
    assert run(["--out", str(tmp_path), "ode", "--config", scenario, "--dt", "1"]) == 2
    assert "numerical failure" in capsys.readouterr().err


@pytest.mark.parametrize("dt, message", [("0.3", "whole multiple"), ("2", "whole multiple"), ("0", "must be positive")])
def test_ode_step_must_tile_the_sampling_interval(tmp_path, capsys, dt, message):
    scenario = write_scenario(tmp_path)
    assert run(["--out", str(tmp_path), "ode", "--config", scenario, "--dt", dt]) == 1
    assert message in capsys.readouterr().err


def test_explicit_zero_t_end_is_respected(tmp_path):
    scenario = write_scenario(tmp_path)
    assert run(["--out", str(tmp_path / "ode"), "ode", "--config", scenario, "--t-end", "0"]) == 0
    assert len(pd.read_csv(tmp_path / "ode" / "ode.csv")) == 1
    assert run(["--out", str(tmp_path / "sim"), "simulate", "--config", scenario, "--t-end", "0"]) == 0
    assert len(pd.read_csv(tmp_path / "sim" / "trajectory.csv")) == 1


@pytest.mark.parametrize("argv", [["no-such-command"], ["ode", "--no-such-flag"], ["--seed", "-3", "ode"]])
def test_usage_errors_exit_with_one(argv):
    assert run(argv) == 1


def test_missing_scenario_exits_with_one(tmp_path, capsys):
    assert run(["--out", str(tmp_path), "ode", "--config", str(tmp_path / "missing.json")]) == 1
    assert "not found" in capsys.readouterr().err


def test_emit_csv_prints_table(tmp_path, capsys):
    scenario = write_scenario(tmp_path, initial_infected=[0, 0], t_end=2, sample_dt=1.0)
    assert run(["--emit", "csv", "--out", str(tmp_path), "ode", "--config", scenario]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,s_1,beta_1,r_1,s_2,beta_2,r_2"
    assert len(lines) == 4


def test_edge_density_experiment(tmp_path, capsys):
    scenario = write_scenario(tmp_path, initial_infected=[0, 0])
    assert run(["--out", str(tmp_path), "experiment", "edge-density", "--config", scenario,
                "--samples", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["all_within"] in (True, False)
    assert len(pd.read_csv(tmp_path / "edge_density.csv")) == 4


def test_edge_age_experiment_rejects_bad_pair(tmp_path):
    scenario = write_scenario(tmp_path)
    assert run(["--out", str(tmp_path), "experiment", "edge-age", "--config", scenario, "--t", "1",
                "--pair", "1,2,3"]) == 1
