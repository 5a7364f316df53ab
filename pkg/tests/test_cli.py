import json
import time

import pytest

from epitransport.cli import main
from epitransport.evaluation import read_csv
from epitransport.odeint import METHODS


def write_config(tmp_path, toy_dir, **extra):
    cfg = {
        "horizons": [3],
        "data": {"cases": str(toy_dir / "cases.csv"), "mobility": str(toy_dir / "mobility.csv"),
                 "centroids": str(toy_dir / "centroids.csv")},
        "train": {"max_epochs": 2},
    }
    for key, value in extra.items():
        cfg[key] = dict(cfg.get(key, {}), **value) if isinstance(value, dict) else value
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_missing_cases_file_is_a_data_error(tmp_path, toy_dir, capsys):
    cfg = write_config(tmp_path, toy_dir, data={"cases": str(tmp_path / "absent.csv")})
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert err.startswith("error[data]:") and err.count("\n") == 1


def test_unknown_config_key_is_rejected(tmp_path, toy_dir, capsys):
    cfg = write_config(tmp_path, toy_dir, train={"learning_rate": 0.1})
    code, _, err = run(["train", "--config", cfg], capsys)
    assert code == 1 and err.startswith("error[config]:") and "train.learning_rate" in err


@pytest.mark.parametrize("bad", [{"horizons": []}, {"seed": -1}, {"ratios": [0.5, 0.5, 0.5]},
                                 {"solver": {"method": "rk45"}}, {"model": {"terms": ["sir"]}}])
def test_invalid_values_are_config_errors(tmp_path, toy_dir, capsys, bad):
    code, _, err = run(["train", "--config", write_config(tmp_path, toy_dir, **bad)], capsys)
    assert code == 1 and err.startswith("error[config]:")


def test_bad_log_level(tmp_path, toy_dir, capsys, monkeypatch):
    monkeypatch.setenv("EPITRANSPORT_LOG", "loud")
    code, _, err = run(["train", "--config", write_config(tmp_path, toy_dir)], capsys)
    assert code == 1 and err.startswith("error[config]:")


def test_divergence_exit_code(tmp_path, toy_dir, capsys):
    cfg = write_config(tmp_path, toy_dir, solver={"method": "dopri5", "max_steps": 1})
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and err.startswith("error[divergence]:")


@pytest.fixture
def trained(tmp_path, toy_dir, capsys):
    cfg = write_config(tmp_path, toy_dir)
    out = tmp_path / "run"
    code, stdout, err = run(["train", "--config", cfg, "--out", out], capsys)
    assert code == 0, err
    return cfg, out, json.loads(stdout)


def test_train_smoke(trained):
    cfg, out, summary = trained
    doc = json.loads((out / "model.ckpt.json").read_text())
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    config = json.loads((out / "config.json").read_text())
    assert len(history) == 2 and history[0]["config_hash"] == summary["config_hash"]
    assert config["config_hash"] == summary["config_hash"] == doc["config_hash"]
    assert config["config"]["train"]["max_epochs"] == 2
    assert doc["region_ids"] == ["north", "south"]


def test_train_is_byte_identical(trained, tmp_path, capsys):
    cfg, out, _ = trained
    code, _, _ = run(["train", "--config", cfg, "--out", tmp_path / "again"], capsys)
    assert code == 0
    assert (out / "model.ckpt.json").read_bytes() == (tmp_path / "again" / "model.ckpt.json").read_bytes()


def test_seed_changes_checkpoint(trained, tmp_path, capsys):
    cfg, out, _ = trained
    assert run(["--seed", 9, "train", "--config", cfg, "--out", tmp_path / "s9"], capsys)[0] == 0
    assert (out / "model.ckpt.json").read_bytes() != (tmp_path / "s9" / "model.ckpt.json").read_bytes()


def test_eval_outputs(trained, capsys):
    cfg, out, summary = trained
    code, _, err = run(["eval", "--config", cfg, "--out", out], capsys)
    assert code == 0, err
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["config_hash"] == summary["config_hash"]
    assert [r["name"] for r in metrics["reports"]] == ["model", "ha", "persistence"]
    for r in metrics["reports"]:
        assert r["horizons"]["3"]["mae"] <= r["horizons"]["3"]["rmse"]
        assert "seconds" not in r
    comments, rows = read_csv(out / "forecast_h3.csv")
    assert comments["config_hash"] == summary["config_hash"]
    assert list(rows[0]) == ["region_id", "date", "horizon_step", "y_true", "y_pred"]
    _, regions = read_csv(out / "eval_regions.csv")
    assert {r["region_id"] for r in regions} == {"north", "south"}


def test_eval_refuses_mismatched_checkpoint(trained, tmp_path, capsys):
    cfg, out, _ = trained
    sim = tmp_path / "sim"
    assert run(["simulate", "--out", sim, "--config",
                _sim_config(tmp_path, n_regions=3, n_days=40)], capsys)[0] == 0
    code, _, err = run(["eval", "--config", cfg, "--data", sim, "--out", out], capsys)
    assert code == 2 and err.startswith("error[data]:") and "regions" in err


def _sim_config(tmp_path, **scenario):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"simulate": scenario}))
    return path


def test_forecast_after_as_of(trained, capsys):
    cfg, out, _ = trained
    code, _, err = run(["forecast", "--config", cfg, "--out", out, "--as-of", "2021-02-27"], capsys)
    assert code == 0, err
    _, rows = read_csv(out / "forecast.csv")
    assert len(rows) == 2 * 3
    assert [r["date"] for r in rows[:3]] == ["2021-02-28", "2021-03-01", "2021-03-02"]
    assert rows[0]["y_true"] != "" and rows[2]["y_true"] == ""
    code, _, err = run(["forecast", "--config", cfg, "--out", out, "--as-of", "1999-01-01"], capsys)
    assert code == 2


def test_solvers_one_row_per_method(trained, tmp_path, capsys):
    cfg, out, _ = trained
    code, _, err = run(["solvers", "--config", cfg, "--out", out], capsys)
    assert code == 0, err
    _, rows = read_csv(out / "solvers.csv")
    assert [r["method"] for r in rows] == list(METHODS)
    text = json.loads(cfg.read_text())
    text["evaluation"] = {"solver_methods": ["euler", "rk4"], "solver_repeats": 1}
    cfg2 = tmp_path / "two.json"
    cfg2.write_text(json.dumps(text))
    assert run(["solvers", "--config", cfg2, "--out", out], capsys)[0] == 0
    assert [r["method"] for r in read_csv(out / "solvers.csv")[1]] == ["euler", "rk4"]


def test_export_gamma(trained, capsys):
    cfg, out, _ = trained
    code, stdout, err = run(["export-gamma", "--config", cfg, "--out", out], capsys)
    assert code == 0, err
    _, rows = read_csv(out / "export-gamma.csv")
    assert [r["region_id"] for r in rows] == ["north", "south"]
    assert all(0 < float(r["gamma"]) < 1 for r in rows)


def test_ablate_has_seven_rows(tmp_path, toy_dir, capsys):
    cfg = write_config(tmp_path, toy_dir, train={"max_epochs": 1},
                       solver={"method": "rk4", "adaptive": False, "fixed_dt": 0.5})
    code, _, err = run(["ablate", "--config", cfg, "--out", tmp_path / "abl"], capsys)
    assert code == 0, err
    _, rows = read_csv(tmp_path / "abl" / "ablate.csv")
    assert [r["variant"] for r in rows] == [
        "full", "Dif-Only", "Adv-Only", "Rea-Only", "Dif-Adv", "Dif-Rea", "Adv-Rea"]


def test_simulate_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "sim"
    code, stdout, err = run(["--seed", 3, "simulate", "--out", out, "--config",
                             _sim_config(tmp_path, n_regions=4, n_days=30)], capsys)
    assert code == 0, err
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 3 and meta["T"] == 30 and len(meta["gamma"]) == 4
    run_cfg = json.loads((out / "run.json").read_text())
    assert run_cfg["data"]["cases"] == "cases.csv"


@pytest.mark.slow
def test_simulate_train_eval_under_five_minutes(tmp_path, capsys):
    started = time.perf_counter()
    out = tmp_path / "e2e"
    assert run(["simulate", "--out", out], capsys)[0] == 0
    assert run(["train", "--config", out / "run.json", "--out", out], capsys)[0] == 0
    code, stdout, err = run(["eval", "--config", out / "run.json", "--out", out], capsys)
    assert code == 0, err
    assert time.perf_counter() - started < 300
