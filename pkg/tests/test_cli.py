import json

import pandas as pd
import pytest

import run
from app.services import dataset_service


@pytest.fixture
def tiny_dir(tmp_path, tiny_instance):
    dataset_service.write_instance(tiny_instance, tmp_path / "tiny")
    return str(tmp_path / "tiny")


def _json(result):
    return json.loads(result.stdout)


def test_gen_then_validate(runner, tmp_path):
    out = tmp_path / "generated"
    result = runner.invoke(args=["gen", "--seed", "3", "--buses", "2", "--trips", "8", "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert "written to" in result.stdout

    result = runner.invoke(args=["validate", "--instance-dir", str(out), "--json"])
    assert result.exit_code == 0, result.output
    payload = _json(result)
    assert payload["status"] == "success"
    assert payload["data"]["report"]["issues"] == []


def test_bad_input_exits_with_two(runner, tmp_path):
    trips = tmp_path / "trips.csv"
    trips.write_text("trip_id,bus_id\nT1,B01\n")
    result = runner.invoke(args=["validate", "--trips", str(trips)])
    assert result.exit_code == 2
    assert "trips.csv" in result.output


def test_gen_rejects_bad_sizes(runner, tmp_path):
    result = runner.invoke(args=["gen", "--buses", "3", "--trips", "4", "-o", str(tmp_path / "g")])
    assert result.exit_code == 2


def test_build_writes_model(runner, tmp_path, tiny_dir):
    path = tmp_path / "model.mps"
    result = runner.invoke(args=["build", "--instance-dir", tiny_dir, "-o", str(path), "--json"])
    assert result.exit_code == 0, result.output
    assert path.exists()
    data = _json(result)["data"]
    assert data["variables"] == 74
    assert data["path"] == str(path)


def test_solve_then_report(runner, tmp_path, tiny_dir, tiny_instance):
    run_dir = tmp_path / "run"
    result = runner.invoke(
        args=["solve", "--instance-dir", tiny_dir, "--scenario", "basic", "--run-dir", str(run_dir), "--json"]
    )
    assert result.exit_code == 0, result.output
    costs = _json(result)["data"]["costs"]
    assert costs["charging_eur"] == pytest.approx(0.10 * tiny_instance.trips[0].energy_kwh, rel=1e-6)
    for name in dataset_service.RUN_FILES:
        assert (run_dir / name).exists()
    schedule = pd.read_csv(run_dir / "schedule.csv")
    assert list(schedule["kind"]) == ["charge", "trip", "idle", "idle"]

    result = runner.invoke(args=["report", str(run_dir), "--json"])
    assert result.exit_code == 0, result.output
    data = _json(result)["data"]
    assert data["violations"] == []
    assert data["costs"]["total_eur"] == pytest.approx(costs["total_eur"])


def test_report_rejects_edited_instance(runner, tmp_path, tiny_dir):
    run_dir = tmp_path / "run"
    runner.invoke(args=["solve", "--instance-dir", tiny_dir, "--run-dir", str(run_dir)])
    manifest = json.loads((run_dir / "manifest.json").read_text())
    manifest["instance_hash"] = "0" * len(manifest["instance_hash"])
    (run_dir / "manifest.json").write_text(json.dumps(manifest))
    result = runner.invoke(args=["report", str(run_dir)])
    assert result.exit_code == 2


def test_infeasible_exits_with_three(runner, tmp_path, make_instance):
    directory = tmp_path / "capped"
    dataset_service.write_instance(make_instance(hard_cap_kw=100.0), directory)
    result = runner.invoke(args=["solve", "--instance-dir", str(directory)])
    assert result.exit_code == 3
    assert "error:" in result.output


def test_missing_cbc_exits_with_four(runner, tmp_path, tiny_dir):
    result = runner.invoke(
        args=["solve", "--instance-dir", tiny_dir, "--solver", "cbc", "--cbc-path", str(tmp_path / "no-cbc")]
    )
    assert result.exit_code == 4
    assert "CBC_PATH" in result.output


def test_tariff_margin_sweep_command(runner, tmp_path, tiny_dir):
    out = tmp_path / "sweep.csv"
    result = runner.invoke(
        args=[
            "sweep",
            "tariff-margin",
            "--instance-dir",
            tiny_dir,
            "--scenario",
            "basic",
            "--from",
            "0.5",
            "--to",
            "0.6",
            "--step",
            "0.1",
            "-o",
            str(out),
        ]
    )
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out)
    assert list(table["margin"]) == [0.5, 0.6]


def test_main_returns_exit_codes(tmp_path, tiny_dir):
    assert run.main(["validate", "--instance-dir", tiny_dir]) == 0
    assert run.main(["gen", "--buses", "0", "-o", str(tmp_path / "g")]) == 2
    assert run.main(["validate", "--instance-dir", str(tmp_path / "missing")]) == 2


def _manifest_scenario(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())["scenario"]


def test_solve_with_scenario_knobs(runner, tmp_path, tiny_dir):
    run_dir = tmp_path / "run"
    result = runner.invoke(
        args=[
            "solve",
            "--instance-dir",
            tiny_dir,
            "--scenario",
            "all",
            "--window",
            "00:00-01:00",
            "--margin",
            "0.9",
            "--min-session",
            "10",
            "--consistent",
            "--run-dir",
            str(run_dir),
        ]
    )
    assert result.exit_code == 0, result.output
    scenario = _manifest_scenario(run_dir)
    assert scenario["name"] == "all"
    assert scenario["discharge_windows"] == [[0, 60]]
    assert scenario["tariff_margin_frac"] == 0.9
    assert scenario["min_session_minutes"] == 10.0
    assert scenario["literal_loss_accounting"] is False
    assert scenario["enable_pv_ess"] is True


def test_solve_with_scenario_file(runner, tmp_path, tiny_dir):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"name": "late", "enable_v2g": True, "paper_literal_mode": False}))
    run_dir = tmp_path / "run"
    result = runner.invoke(
        args=["solve", "--instance-dir", tiny_dir, "--scenario-file", str(path), "--run-dir", str(run_dir)]
    )
    assert result.exit_code == 0, result.output
    scenario = _manifest_scenario(run_dir)
    assert scenario["name"] == "late"
    assert scenario["enable_v2g"] is True
    assert scenario["enable_peak_cost"] is False
    assert scenario["literal_loss_accounting"] is False


@pytest.mark.parametrize(
    "extra",
    [["--window", "7am-10am"], ["--scenario-file", "scenario.json"], ["--min-session", "-5"]],
)
def test_bad_scenario_knobs_exit_with_two(runner, tmp_path, tiny_dir, monkeypatch, extra):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "scenario.json").write_text(json.dumps({"colour": "red"}))
    result = runner.invoke(args=["build", "--instance-dir", tiny_dir, "-o", str(tmp_path / "m.mps")] + extra)
    assert result.exit_code == 2
