"""
Tests for the bisac command line
"""
import json

import pytest

import main
from errors import ConfigError

SMALL = {
    "name": "cli-small",
    "stage": "ls",
    "system": {"n_tx": 4, "n_rx": 4, "sig_len": 64, "power_dbm": 30.0, "noise_dbm": -40.0},
    "pattern": {"start_deg": 0.0, "stop_deg": 180.0, "step_deg": 10.0},
    "gamma_uth_db": 10.0,
}


@pytest.fixture
def scenario_file(tmp_path):
    def write(**overrides):
        data = {**SMALL, **overrides}
        path = tmp_path / f"{data['name']}.json"
        path.write_text(json.dumps(data))
        return path
    return write


def test_presets_listing(capsys):
    assert main.main(["presets"]) == main.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10
    assert lines[0].split("\t")[:2] == ["fig3", "detect"]


def test_validate_good_and_bad(scenario_file, capsys):
    assert main.main(["validate", str(scenario_file())]) == main.EXIT_OK
    assert json.loads(capsys.readouterr().out)["ok"] is True

    bad = scenario_file(name="bad", system={"n_tx": 0})
    assert main.main(["validate", str(bad)]) == main.EXIT_ERROR
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] is False
    assert any(e.startswith("system.n_tx:") for e in report["errors"])


def test_run_writes_bundle(scenario_file, tmp_path):
    out = tmp_path / "out"
    metrics = tmp_path / "metrics.prom"
    code = main.main([
        "run", "--scenario", str(scenario_file()), "--out", str(out),
        "--seed", "11", "--trials", "20", "--metrics-file", str(metrics),
    ])
    assert code == main.EXIT_OK
    for name in ("beampattern.csv", "solve_report.json", "summary.json", "trials_ls.json"):
        assert (out / name).exists()
    assert json.loads((out / "summary.json").read_text())["seed"] == 11
    assert json.loads((out / "trials_ls.json").read_text())["trials"] == 20
    assert "bisac_solves_total" in metrics.read_text()


def test_infeasible_run_exits_with_two(scenario_file, tmp_path):
    path = scenario_file(
        name="unreachable",
        stage="comm",
        system={**SMALL["system"], "noise_ap_dbm": 36.0},
        gamma_apth_db=12.0,
    )
    assert main.main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == main.EXIT_INFEASIBLE


def test_unknown_scenario_is_an_error(tmp_path, capsys):
    code = main.main(["run", "--scenario", "fig99", "--out", str(tmp_path / "out")])
    assert code == main.EXIT_ERROR
    assert "fig99" in capsys.readouterr().err


def test_sweep_without_grid(scenario_file, tmp_path):
    code = main.main(["sweep", "--scenario", str(scenario_file()), "--out", str(tmp_path / "out")])
    assert code == main.EXIT_ERROR


def test_sweep_writes_long_table(scenario_file, tmp_path):
    path = scenario_file(sweep={"parameter": "power_dbm", "from": 20.0, "to": 30.0, "step": 10.0})
    out = tmp_path / "out"
    assert main.main(["sweep", "--scenario", str(path), "--out", str(out), "--workers", "1"]) == main.EXIT_OK
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "sweep_param,value,metric,analytic,empirical,ci95"
    assert sum(1 for r in rows if r.endswith(",status,ok,,")) == 2


def test_load_config_reads_environment(monkeypatch):
    monkeypatch.setenv("BISAC_WORKERS", "3")
    monkeypatch.setenv("LOG_LEVEL", "debug")
    config = main.load_config()
    assert config.workers == 3
    assert config.log_level == "DEBUG"


@pytest.mark.parametrize("variable,value", [("BISAC_WORKERS", "many"), ("BISAC_WORKERS", "0"), ("LOG_LEVEL", "chatty")])
def test_bad_environment_is_a_config_error(monkeypatch, capsys, variable, value):
    monkeypatch.setenv(variable, value)
    with pytest.raises(ConfigError) as exc:
        main.load_config()
    assert exc.value.message.startswith(f"{variable}:")

    assert main.main(["presets"]) == main.EXIT_ERROR
    assert variable in capsys.readouterr().err


def test_sweep_trials_fill_empirical_column(scenario_file, tmp_path):
    path = scenario_file(sweep={"parameter": "power_dbm", "from": 30.0, "to": 30.0, "step": 1.0})
    out = tmp_path / "out"
    code = main.main(["sweep", "--scenario", str(path), "--out", str(out), "--workers", "1", "--trials", "5"])
    assert code == main.EXIT_OK
    row = next(r for r in (out / "sweep.csv").read_text().splitlines() if ",j_ls," in r)
    _, _, _, analytic, empirical, ci95 = row.split(",")
    assert float(empirical) > 0.0 and float(ci95) >= 0.0
    assert float(analytic) > 0.0
