"""Metrics, baselines, ablations, solver benchmarks and the gamma export."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EpidemicDataset, chronological_split, stack_samples
from .metrics import mae, per_region_mean, rmse
from .odeint import METHODS, SolverConfig
from .training import TrainConfig, fit, predict
from .transport import TERMS

log = logging.getLogger(__name__)

__all__ = [
    "mae", "rmse", "AGGREGATIONS", "MASKS", "EvalReport", "baseline_ha", "baseline_persistence",
    "score", "evaluate_model", "evaluate_baseline", "forecast_rows", "mask_name", "ablate",
    "solver_benchmark", "export_gamma", "write_csv", "read_csv",
]

AGGREGATIONS = ("flatten", "region_mean")

# full model first, then the six reduced variants
MASKS = (TERMS,) + tuple(
    c for r in (1, 2) for c in itertools.combinations(TERMS, r))

_MAE_RMSE_SLACK = 1e-9


def mask_name(terms) -> str:
    terms = tuple(t for t in TERMS if t in terms)
    if terms == TERMS:
        return "full"
    label = "-".join(t.capitalize() for t in terms)
    return f"{label}-Only" if len(terms) == 1 else label


@dataclass
class EvalReport:
    """Per-horizon test metrics on the raw case scale.

    ``horizons`` maps each horizon to ``{"mae", "rmse"}``; ``per_region``
    maps each horizon to ``{region_id: {"mae", "rmse"}}``.
    """

    name: str
    horizons: dict
    per_region: dict
    seconds: float = 0.0
    config: dict = field(default_factory=dict)
    terms: tuple = TERMS
    aggregation: str = "flatten"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.terms = tuple(self.terms)
        for where, entry in self._entries():
            if entry["mae"] > entry["rmse"] * (1 + _MAE_RMSE_SLACK) + _MAE_RMSE_SLACK:
                raise AssertionError(f"MAE exceeds RMSE in {where}: {entry}")

    def _entries(self):
        for h, e in self.horizons.items():
            yield f"horizon {h}", e
        for h, regions in self.per_region.items():
            for rid, e in regions.items():
                yield f"horizon {h} region {rid}", e

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {
            "name": self.name,
            "terms": list(self.terms),
            "aggregation": self.aggregation,
            "horizons": {str(h): v for h, v in self.horizons.items()},
            "per_region": {str(h): v for h, v in self.per_region.items()},
            "config": self.config,
            "extra": self.extra,
        }
        if include_timing:
            doc["seconds"] = self.seconds
        return doc


# -- baselines ---------------------------------------------------------------

def baseline_ha(window, horizon: int) -> np.ndarray:
    """Historical average: the window mean repeated for every forecast step.

    ``window`` is (..., N, w) on the raw scale; returns (..., N, horizon).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < 1:
        raise ValueError("historical average needs at least one observed day")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mean = window.mean(axis=-1, keepdims=True)
    return np.repeat(mean, horizon, axis=-1)


def baseline_persistence(window, horizon: int) -> np.ndarray:
    """Repeat the last observed value for every forecast step."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < 1:
        raise ValueError("persistence needs at least one observed day")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return np.repeat(window[..., -1:], horizon, axis=-1)


# -- scoring -----------------------------------------------------------------

def score(target, pred, region_ids, aggregation: str = "flatten") -> tuple[dict, dict]:
    """Headline and per-region ``{mae, rmse}`` for (B, N, h) arrays."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}; choose from {AGGREGATIONS}")
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape or target.ndim != 3:
        raise ValueError(f"expected matching (B, N, h) arrays, got {target.shape} and {pred.shape}")
    if aggregation == "flatten":
        head = {"mae": mae(target, pred), "rmse": rmse(target, pred)}
    else:
        head = {"mae": per_region_mean(mae, target, pred),
                "rmse": per_region_mean(rmse, target, pred)}
    regions = {
        rid: {"mae": mae(target[:, i], pred[:, i]), "rmse": rmse(target[:, i], pred[:, i])}
        for i, rid in enumerate(region_ids)
    }
    return head, regions


def _test_samples(dataset, window, horizon, ratios):
    splits = chronological_split(dataset, ratios, window, horizon)
    if not splits.test:
        raise ValueError(f"test split is empty for horizon {horizon}")
    return splits.test


def evaluate_model(model, dataset: EpidemicDataset, horizons=(3, 5, 7), ratios=(0.6, 0.2, 0.2),
                   solver: SolverConfig | None = None, seed: int = 0,
                   aggregation: str = "flatten", name: str = "model",
                   config: dict | None = None) -> tuple[EvalReport, dict]:
    """Score ``model`` on the test split for every horizon.

    Returns the report and ``{h: (samples, predictions)}`` for forecast export.
    """
    started = time.perf_counter()
    horizons_out, regions_out, raw = {}, {}, {}
    for h in horizons:
        samples = _test_samples(dataset, model.cfg.window, h, ratios)
        pred = predict(model, samples, solver, seed=seed)
        target = np.stack([s.target for s in samples])
        horizons_out[h], regions_out[h] = score(target, pred, dataset.graph.region_ids,
                                                aggregation)
        raw[h] = (samples, pred)
    report = EvalReport(name, horizons_out, regions_out, time.perf_counter() - started,
                        config or {}, model.cfg.terms, aggregation)
    return report, raw


def evaluate_baseline(kind: str, dataset: EpidemicDataset, horizons=(3, 5, 7), window: int = 7,
                      ratios=(0.6, 0.2, 0.2), aggregation: str = "flatten") -> EvalReport:
    fn = {"ha": baseline_ha, "persistence": baseline_persistence}.get(kind)
    if fn is None:
        raise ValueError(f"unknown baseline {kind!r}")
    horizons_out, regions_out = {}, {}
    for h in horizons:
        samples = _test_samples(dataset, window, h, ratios)
        target = np.stack([s.target for s in samples])
        pred = fn(np.stack([s.raw_window for s in samples]), h)
        horizons_out[h], regions_out[h] = score(target, pred, dataset.graph.region_ids,
                                                aggregation)
    return EvalReport(kind, horizons_out, regions_out, aggregation=aggregation, terms=())


def forecast_rows(dataset: EpidemicDataset, samples, pred) -> list[tuple]:
    """Tidy rows ``(region_id, date, horizon_step, y_true, y_pred)``."""
    rows = []
    for s, p in zip(samples, pred):
        for i, rid in enumerate(dataset.graph.region_ids):
            for step in range(p.shape[-1]):
                day = s.anchor_t + 1 + step
                rows.append((rid, dataset.dates[day], step + 1,
                             float(s.target[i, step]), float(p[i, step])))
    return rows


# -- ablation ----------------------------------------------------------------

def ablate(dataset: EpidemicDataset, train_cfg: TrainConfig, masks=MASKS, horizon: int = 3,
           ratios=(0.6, 0.2, 0.2), seeds=None, conservative: bool = False,
           aggregation: str = "flatten") -> list[EvalReport]:
    """Train and score one model per term mask.

    With several ``seeds`` the reported metrics are means over seeds and the
    per-seed values are kept in ``extra``.
    """
    seeds = tuple(seeds) if seeds is not None else (train_cfg.seed,)
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    splits = chronological_split(dataset, ratios, train_cfg.window, horizon)
    target = np.stack([s.target for s in splits.test])
    reports = []
    for mask in masks:
        terms = tuple(t for t in TERMS if t in mask)
        if not terms or set(mask) - set(TERMS):
            raise ValueError(f"invalid ablation mask {mask!r}")
        started = time.perf_counter()
        per_seed = []
        for seed in seeds:
            cfg = dataclasses.replace(train_cfg, seed=seed)
            result = fit(splits, dataset.graph, cfg, terms=terms, conservative=conservative)
            pred = predict(result.model, splits.test, cfg.solver, seed=seed + 1)
            per_seed.append(score(target, pred, dataset.graph.region_ids, aggregation))
        head = {m: float(np.mean([s[0][m] for s in per_seed])) for m in ("mae", "rmse")}
        regions = {rid: {m: float(np.mean([s[1][rid][m] for s in per_seed]))
                         for m in ("mae", "rmse")} for rid in dataset.graph.region_ids}
        extra = {"seeds": list(seeds),
                 "seed_rmse": [s[0]["rmse"] for s in per_seed],
                 "seed_mae": [s[0]["mae"] for s in per_seed]}
        log.info("ablation %s: rmse=%.4f", mask_name(terms), head["rmse"])
        reports.append(EvalReport(mask_name(terms), {horizon: head}, {horizon: regions},
                                  time.perf_counter() - started, terms=terms,
                                  aggregation=aggregation, extra=extra))
    return reports


# -- solver benchmark --------------------------------------------------------

def solver_benchmark(model, samples, methods=METHODS, base: SolverConfig | None = None,
                     seed: int = 0, repeats: int = 3) -> list[dict]:
    """Accuracy and inference time of one trained model under each solver.

    Wall time is the fastest of ``repeats`` passes over ``samples``. Speedup
    is Euler's time divided by the method's time, so Euler reads 1.0.
    """
    base = base or SolverConfig()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    target = np.stack([s.target for s in samples])
    stack_samples(samples)  # shape validation before timing
    rows = []
    for method in methods:
        solver = base.with_method(method)
        best, pred = float("inf"), None
        for _ in range(repeats):
            started = time.perf_counter()
            pred = predict(model, samples, solver, seed=seed)
            best = min(best, time.perf_counter() - started)
        rows.append({"method": method, "adaptive": solver.is_adaptive,
                     "rmse": rmse(target, pred), "mae": mae(target, pred), "seconds": best})
    euler = next((r["seconds"] for r in rows if r["method"] == "euler"), None)
    for r in rows:
        r["speedup"] = euler / r["seconds"] if euler is not None else None
    return rows


# -- interpretability --------------------------------------------------------

def export_gamma(model, region_ids) -> list[tuple[str, float]]:
    """Per-region reaction coefficients ``(region_id, gamma)``."""
    gamma = model.gamma()
    if len(region_ids) != gamma.shape[0]:
        raise ValueError(f"{len(region_ids)} region ids for {gamma.shape[0]} gamma values")
    return [(rid, float(g)) for rid, g in zip(region_ids, gamma)]


# -- CSV helpers -------------------------------------------------------------

def write_csv(path, header, rows, config_hash: str | None = None) -> None:
    """Write a CSV, optionally preceded by a ``# config_hash: ...`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[dict, list[dict]]:
    """Read a CSV written by :func:`write_csv`; returns ``(comments, rows)``."""
    comments, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            comments[key.strip()] = value.strip()
        elif line.strip():
            lines.append(line)
    return comments, list(csv.DictReader(lines))
