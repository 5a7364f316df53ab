import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from epitransport.data import ScenarioConfig, chronological_split, simulate_scenario, synthesize_dar, synthetic_graph
from epitransport.evaluation import (
    MASKS, EvalReport, ablate, baseline_ha, baseline_persistence, evaluate_baseline,
    evaluate_model, export_gamma, forecast_rows, mae, mask_name, read_csv, rmse, score,
    solver_benchmark, write_csv,
)
from epitransport.neural import ModelConfig, NormStats, TransportForecaster
from epitransport.odeint import METHODS, SolverConfig
from epitransport.training import TrainConfig, fit, predict
from epitransport.transport import TERMS

FAST = SolverConfig(method="rk4", fixed_dt=0.5, adaptive=False)


@pytest.fixture(scope="module")
def scenario():
    ds = simulate_scenario(ScenarioConfig(n_regions=5, n_days=70))
    return ds, chronological_split(ds, (0.6, 0.2, 0.2), 7, 3)


def test_metric_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0 and rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([1, 2, 3], [2, 2, 5]) == 1.0
    assert rmse([1, 2, 3], [2, 2, 5]) == math.sqrt(5 / 3)
    assert round(rmse([1, 2, 3], [2, 2, 5]), 4) == 1.2910
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), st.floats(-50, 50))
def test_constant_residual_gives_equal_metrics(x, r):
    assert mae(x + r, x) == pytest.approx(abs(r), abs=1e-9)
    assert rmse(x + r, x) == pytest.approx(abs(r), abs=1e-9)


@given(arrays(np.float64, (3, 2, 4), elements=st.floats(0, 1e4)),
       arrays(np.float64, (3, 2, 4), elements=st.floats(0, 1e4)))
def test_mae_never_exceeds_rmse(x, y):
    for agg in ("flatten", "region_mean"):
        head, regions = score(x, y, ["a", "b"], agg)
        EvalReport("p", {3: head}, {3: regions}, aggregation=agg)
        assert head["mae"] <= head["rmse"] * (1 + 1e-12) + 1e-12


def test_report_rejects_mae_above_rmse():
    with pytest.raises(AssertionError):
        EvalReport("bad", {3: {"mae": 2.0, "rmse": 1.0}}, {})


def test_region_mean_aggregation():
    target = np.zeros((1, 2, 2))
    pred = np.array([[[1.0, 1.0], [3.0, 3.0]]])
    head, regions = score(target, pred, ["a", "b"], "region_mean")
    assert head == {"mae": 2.0, "rmse": 2.0}
    assert regions["b"] == {"mae": 3.0, "rmse": 3.0}
    flat, _ = score(target, pred, ["a", "b"], "flatten")
    assert flat["rmse"] == math.sqrt(5)
    with pytest.raises(ValueError):
        score(target, pred, ["a", "b"], "median")


def test_ha_examples():
    np.testing.assert_array_equal(baseline_ha(np.full((2, 7), 4.0), 3), np.full((2, 3), 4.0))
    np.testing.assert_array_equal(baseline_ha([[0.0, 10.0]], 5), [[5.0] * 5])
    with pytest.raises(ValueError):
        baseline_ha(np.zeros((2, 0)), 3)


def test_persistence_examples():
    np.testing.assert_array_equal(baseline_persistence([[1.0, 7.0, 4.0]], 3), [[4.0, 4.0, 4.0]])
    np.testing.assert_array_equal(baseline_persistence(np.zeros((2, 5)), 2), np.zeros((2, 2)))
    ramp = np.arange(20.0)
    pred = baseline_persistence(ramp[None, :7], 3)
    assert np.all(pred - ramp[None, 7:10] < 0)       # underpredicts growth


def test_mask_names_and_order():
    assert [mask_name(m) for m in MASKS] == [
        "full", "Dif-Only", "Adv-Only", "Rea-Only", "Dif-Adv", "Dif-Rea", "Adv-Rea"]


def test_untrained_gamma_export():
    model = TransportForecaster.create(ModelConfig(n_regions=3), np.eye(3), NormStats.identity(3))
    rows = export_gamma(model, ["a", "b", "c"])
    assert rows == [("a", 0.5), ("b", 0.5), ("c", 0.5)]
    model.params["coef.gamma_raw"].value = np.array([-30.0, 0.3, 30.0])
    assert all(0.0 < g < 1.0 for _, g in export_gamma(model, ["a", "b", "c"]))
    with pytest.raises(ValueError):
        export_gamma(model, ["a"])


def test_disabled_diffusion_ignores_k_and_laplacian(scenario):
    ds, splits = scenario
    cfg = ModelConfig(n_regions=5, terms=("adv", "rea"))
    model = TransportForecaster.create(cfg, ds.graph.laplacian_norm, splits.stats, seed=1)
    base = predict(model, splits.test, FAST, seed=3)
    model.params["coef.k_raw"].value = np.array([4.0])
    model.laplacian = np.random.default_rng(0).normal(size=(5, 5))
    assert predict(model, splits.test, FAST, seed=3).tobytes() == base.tobytes()


def test_full_mask_reproduces_unablated_model(scenario):
    ds, splits = scenario
    cfg = TrainConfig(max_epochs=2, solver=FAST, seed=5)
    (report,) = ablate(ds, cfg, masks=(TERMS,), horizon=3)
    res = fit(splits, ds.graph, cfg)
    pred = predict(res.model, splits.test, FAST, seed=6)
    target = np.stack([s.target for s in splits.test])
    assert report.name == "full"
    assert report.horizons[3]["rmse"] == rmse(target, pred)
    assert report.horizons[3]["mae"] == mae(target, pred)


def test_ablate_rejects_bad_masks(scenario):
    ds, _ = scenario
    with pytest.raises(ValueError):
        ablate(ds, TrainConfig(max_epochs=1), masks=((),))
    with pytest.raises(ValueError):
        ablate(ds, TrainConfig(max_epochs=1), masks=(("dif", "sir"),))


@pytest.mark.slow
def test_reaction_only_matches_full_on_reaction_only_data():
    # planted process: k = 0, no mobility, mild per-region growth
    g = synthetic_graph(6, seed=3)
    gamma = np.random.default_rng(3).uniform(0.0, 0.005, 6)
    ds = synthesize_dar(g, 150, 0.0, gamma, None, noise=0.05, seed=3)
    full, rea = ablate(ds, TrainConfig(), masks=(TERMS, ("rea",)), seeds=(0, 1, 2))
    ratio = rea.horizons[3]["rmse"] / full.horizons[3]["rmse"]
    assert abs(ratio - 1.0) <= 0.05, (full.extra, rea.extra)


def test_evaluate_model_and_baselines(scenario):
    ds, splits = scenario
    model = TransportForecaster.create(ModelConfig(n_regions=5), ds.graph.laplacian_norm,
                                       splits.stats)
    report, raw = evaluate_model(model, ds, horizons=(3, 5), solver=FAST)
    assert set(report.horizons) == {3, 5}
    assert set(report.per_region[5]) == set(ds.region_ids)
    samples, pred = raw[3]
    assert pred.shape == (len(samples), 5, 3)
    ha = evaluate_baseline("ha", ds, horizons=(3,))
    target = np.stack([s.target for s in splits.test])
    expected = baseline_ha(np.stack([s.raw_window for s in splits.test]), 3)
    assert ha.horizons[3]["rmse"] == rmse(target, expected)
    rows = forecast_rows(ds, samples, pred)
    assert len(rows) == len(samples) * 5 * 3
    rid, date, step, y_true, _ = rows[0]
    s0 = samples[0]
    assert (rid, date, step) == (ds.region_ids[0], ds.dates[s0.anchor_t + 1], 1)
    assert y_true == s0.target[0, 0]
    with pytest.raises(ValueError):
        evaluate_baseline("arima", ds)


def test_solver_benchmark_rows(scenario):
    ds, splits = scenario
    model = TransportForecaster.create(ModelConfig(n_regions=5), ds.graph.laplacian_norm,
                                       splits.stats)
    rows = solver_benchmark(model, splits.test, repeats=1)
    assert [r["method"] for r in rows] == list(METHODS)
    assert rows[0]["speedup"] == 1.0
    assert all(r["mae"] <= r["rmse"] for r in rows)
    assert len(solver_benchmark(model, splits.test, methods=("rk4",), repeats=1)) == 1


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], [(1, 2.5), ("r", 3)], config_hash="abc")
    comments, rows = read_csv(tmp_path / "x.csv")
    assert comments == {"config_hash": "abc"}
    assert rows == [{"a": "1", "b": "2.5"}, {"a": "r", "b": "3"}]
