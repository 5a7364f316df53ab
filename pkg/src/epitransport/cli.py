"""Command-line entry point: ``epitransport <command> [--config F] [--out D] [--seed S]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence, 4 unexpected failure. Failures print one line to stderr of the
form ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, ScenarioConfig, chronological_split, load_dataset,
                   simulate_scenario, write_dataset)
from .evaluation import (MASKS, ablate, evaluate_baseline, evaluate_model, export_gamma,
                         forecast_rows, mask_name, solver_benchmark, write_csv)
from .graph import GraphError
from .neural import (ModelConfig, TransportForecaster, config_hash, load_checkpoint,
                     save_checkpoint)
from .odeint import METHODS, SolverConfig, SolverError
from .tape import Tensor
from .training import TrainConfig, TrainingDivergenceError, predict, train
from .transport import TERMS

log = logging.getLogger("epitransport")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_INTERNAL = 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
DATA_FILES = {"cases": "cases.csv", "mobility": "mobility.csv", "centroids": "centroids.csv"}
# subsystem seeds are derived from the run seed by fixed offsets
EVAL_SEED_OFFSET = 1


class ConfigError(ValueError):
    pass


class CheckpointMismatch(DataError):
    pass


# -- run configuration -------------------------------------------------------

def _fields(cls, skip=()):
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls) if f.name not in skip}


def default_config() -> dict:
    train = _fields(TrainConfig, skip=("solver", "seed"))
    train["milestones"] = list(train["milestones"])
    scenario = _fields(ScenarioConfig, skip=("seed",))
    scenario["gamma_range"] = list(scenario["gamma_range"])
    return {
        "seed": 0,
        "out": "runs/default",
        "horizons": [3, 5, 7],
        "ratios": [0.6, 0.2, 0.2],
        "data": {"cases": None, "mobility": None, "centroids": None,
                 "mobility_agg": "sum", "strict_mobility": False},
        "model": {"terms": list(TERMS), "conservative_advection": False},
        "train": train,
        "solver": _fields(SolverConfig),
        "evaluation": {"aggregation": "flatten", "solver_methods": list(METHODS),
                       "solver_repeats": 3, "ablation_seeds": 1},
        "simulate": scenario,
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def resolve_config(path=None, out=None, seed=None, data_dir=None) -> dict:
    """Defaults, then the JSON file, then command-line overrides.

    Relative data paths in a config file are resolved against the file's
    directory.
    """
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc)
        base = Path(path).parent
        for key in DATA_FILES:
            p = cfg["data"][key]
            if isinstance(p, str) and not Path(p).is_absolute():
                cfg["data"][key] = str(base / p)
    if data_dir is not None:
        for key, name in DATA_FILES.items():
            cfg["data"][key] = str(Path(data_dir) / name)
    if out is not None:
        cfg["out"] = str(out)
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    hz = cfg["horizons"]
    if (not isinstance(hz, list) or not hz
            or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in hz)):
        raise ConfigError("horizons must be a non-empty list of positive integers")
    if cfg["evaluation"]["aggregation"] not in ("flatten", "region_mean"):
        raise ConfigError("evaluation.aggregation must be 'flatten' or 'region_mean'")
    bad = set(cfg["evaluation"]["solver_methods"]) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown solver methods {sorted(bad)}; choose from {METHODS}")
    ratios = cfg["ratios"]
    if (not isinstance(ratios, list) or len(ratios) != 3 or any(
            not isinstance(r, (int, float)) or r < 0 for r in ratios)
            or abs(sum(ratios) - 1.0) > 1e-9):
        raise ConfigError("ratios must be three non-negative numbers summing to 1")
    if int(cfg["evaluation"]["ablation_seeds"]) < 1:
        raise ConfigError("evaluation.ablation_seeds must be >= 1")
    try:
        train_config(cfg)
        model_terms(cfg)
        scenario_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def solver_config(cfg) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**cfg["train"], solver=solver_config(cfg), seed=cfg["seed"])


def model_terms(cfg) -> tuple:
    terms = cfg["model"]["terms"]
    if not terms or set(terms) - set(TERMS):
        raise ConfigError(f"model.terms must be a non-empty subset of {list(TERMS)}")
    return tuple(t for t in TERMS if t in terms)


def scenario_config(cfg) -> ScenarioConfig:
    return ScenarioConfig(**cfg["simulate"], seed=cfg["seed"])


def identity(cfg: dict) -> dict:
    """The part of the config that defines an experiment (output location excluded)."""
    return {k: v for k, v in cfg.items() if k != "out"}


def run_hash(cfg: dict) -> str:
    return config_hash(identity(cfg))


# -- helpers -----------------------------------------------------------------

def _dump_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_data(cfg):
    d = cfg["data"]
    missing = [k for k in DATA_FILES if not d[k]]
    if missing:
        raise DataError(f"no data path configured for {', '.join(missing)} "
                        "(set data.* in the config or pass --data DIR)")
    return load_dataset(d["cases"], d["mobility"], d["centroids"],
                        strict_mobility=d["strict_mobility"], mobility_agg=d["mobility_agg"])


def _load_model(cfg, path, dataset=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        model, doc = load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
    if dataset is not None:
        ids = doc.get("region_ids")
        if model.cfg.n_regions != dataset.n_regions or (ids is not None
                                                        and list(ids) != list(dataset.graph.region_ids)):
            raise CheckpointMismatch(
                f"checkpoint {doc.get('config_hash', '?')[:12]} was trained on "
                f"{model.cfg.n_regions} regions but the data has {dataset.n_regions} "
                "(or a different region order)")
    return model, doc


def _checkpoint_path(args, cfg):
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["out"]) / "model.ckpt.json"


# -- commands ----------------------------------------------------------------

def cmd_train(args, cfg):
    out = Path(cfg["out"])
    dataset = _load_data(cfg)
    tcfg = train_config(cfg)
    horizon = max(cfg["horizons"])
    splits = chronological_split(dataset, tuple(cfg["ratios"]), tcfg.window, horizon)
    digest = run_hash(cfg)
    if args.resume:
        model, _ = _load_model(cfg, args.resume, dataset)
        if model.cfg.terms != model_terms(cfg) or model.cfg.hidden != tcfg.hidden:
            raise ConfigError("--resume checkpoint does not match model.terms / train.hidden")
        # a warm start: parameters continue, statistics follow the current split
        model = TransportForecaster(model.cfg, dataset.graph.laplacian_norm, splits.stats,
                                    {k: Tensor(p.value, requires_grad=True, name=k)
                                     for k, p in model.params.items()})
    else:
        mcfg = ModelConfig(n_regions=dataset.n_regions, hidden=tcfg.hidden, window=tcfg.window,
                           n_samples=tcfg.n_samples, terms=model_terms(cfg),
                           conservative_advection=cfg["model"]["conservative_advection"])
        model = TransportForecaster.create(mcfg, dataset.graph.laplacian_norm, splits.stats,
                                           seed=tcfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", {"config": cfg, "config_hash": digest})
    result = train(model, splits, tcfg, history_path=out / "history.jsonl",
                   eval_seed=cfg["seed"] + EVAL_SEED_OFFSET)
    _stamp_history(out / "history.jsonl", digest)
    save_checkpoint(out / "model.ckpt.json", result.model, identity(cfg),
                    dataset.graph.region_ids)
    log.info("best epoch %d val_rmse=%.4f", result.best_epoch, result.best_val_rmse)
    print(json.dumps({"checkpoint": str(out / "model.ckpt.json"), "best_epoch": result.best_epoch,
                      "best_val_rmse": result.best_val_rmse, "config_hash": digest}))


def _stamp_history(path, digest):
    lines = Path(path).read_text().splitlines()
    records = [dict(json.loads(line), config_hash=digest) for line in lines if line.strip()]
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def cmd_eval(args, cfg):
    out = Path(cfg["out"])
    dataset = _load_data(cfg)
    model, doc = _load_model(cfg, _checkpoint_path(args, cfg), dataset)
    digest = run_hash(cfg)
    ratios = tuple(cfg["ratios"])
    aggregation = cfg["evaluation"]["aggregation"]
    report, raw = evaluate_model(model, dataset, cfg["horizons"], ratios, solver_config(cfg),
                                 seed=cfg["seed"] + EVAL_SEED_OFFSET, aggregation=aggregation,
                                 name="model")
    baselines = [evaluate_baseline(kind, dataset, cfg["horizons"], model.cfg.window, ratios,
                                   aggregation) for kind in ("ha", "persistence")]
    reports = [report] + baselines
    _dump_json(out / "metrics.json", {
        "config_hash": digest,
        "checkpoint_hash": doc.get("config_hash"),
        "config": identity(cfg),
        "reports": [r.to_dict(include_timing=False) for r in reports],
    })
    _dump_json(out / "eval_timing.json", {"config_hash": digest, "seconds": report.seconds})
    rows = [(r.name, h, rid, e["mae"], e["rmse"])
            for r in reports for h, regions in r.per_region.items()
            for rid, e in regions.items()]
    write_csv(out / "eval_regions.csv", ["model", "horizon", "region_id", "mae", "rmse"], rows,
              digest)
    for h, (samples, pred) in raw.items():
        write_csv(out / f"forecast_h{h}.csv",
                  ["region_id", "date", "horizon_step", "y_true", "y_pred"],
                  forecast_rows(dataset, samples, pred), digest)
    print(json.dumps({"config_hash": digest,
                      "model": {str(h): v for h, v in report.horizons.items()},
                      "ha": {str(h): v for h, v in baselines[0].horizons.items()}}))


def cmd_forecast(args, cfg):
    out = Path(cfg["out"])
    dataset = _load_data(cfg)
    model, _ = _load_model(cfg, _checkpoint_path(args, cfg), dataset)
    digest = run_hash(cfg)
    horizon = args.horizon or max(cfg["horizons"])
    as_of = args.as_of or dataset.dates[-1]
    if as_of not in dataset.dates:
        raise DataError(f"as-of date {as_of} is not in the data "
                        f"({dataset.dates[0]} .. {dataset.dates[-1]})")
    t = dataset.dates.index(as_of)
    w = model.cfg.window
    if t < w - 1:
        raise DataError(f"as-of date {as_of} leaves fewer than {w} observed days")
    window = model.norm.normalize(dataset.cases[:, t - w + 1:t + 1])
    # days beyond the data reuse the last observed mobility
    idx = [min(t + i, dataset.n_days - 1) for i in range(horizon)]
    mobility = dataset.mobility[idx] / model.norm.mobility_scale
    rng = np.random.default_rng([cfg["seed"] + EVAL_SEED_OFFSET, t])
    eps = rng.standard_normal((1, model.cfg.n_samples, model.cfg.n_regions, model.cfg.hidden))
    from .tape import no_grad
    with no_grad():
        pred = model.forward(window[None], mobility[None], eps, solver_config(cfg)).value[0]
    import datetime as dt
    day0 = dt.date.fromisoformat(as_of)
    rows = []
    for i, rid in enumerate(dataset.graph.region_ids):
        for step in range(horizon):
            day = t + 1 + step
            truth = float(dataset.cases[i, day]) if day < dataset.n_days else ""
            rows.append((rid, (day0 + dt.timedelta(days=step + 1)).isoformat(), step + 1,
                         truth, float(pred[i, step])))
    write_csv(out / "forecast.csv", ["region_id", "date", "horizon_step", "y_true", "y_pred"],
              rows, digest)
    print(json.dumps({"forecast": str(out / "forecast.csv"), "as_of": as_of,
                      "horizon": horizon, "config_hash": digest}))


def cmd_ablate(args, cfg):
    out = Path(cfg["out"])
    dataset = _load_data(cfg)
    digest = run_hash(cfg)
    n_seeds = int(cfg["evaluation"]["ablation_seeds"])
    seeds = [cfg["seed"] + i for i in range(n_seeds)]
    reports = ablate(dataset, train_config(cfg), MASKS, horizon=min(cfg["horizons"]),
                     ratios=tuple(cfg["ratios"]), seeds=seeds,
                     conservative=cfg["model"]["conservative_advection"],
                     aggregation=cfg["evaluation"]["aggregation"])
    rows = []
    for r in reports:
        (h, e), = r.horizons.items()
        rows.append((r.name, "+".join(r.terms), h, e["mae"], e["rmse"], len(seeds)))
    write_csv(out / "ablate.csv", ["variant", "terms", "horizon", "mae", "rmse", "n_seeds"], rows,
              digest)
    print(json.dumps({"ablate": str(out / "ablate.csv"), "config_hash": digest,
                      "rmse": {r.name: r.horizons[min(cfg["horizons"])]["rmse"]
                               for r in reports}}))


def cmd_solvers(args, cfg):
    out = Path(cfg["out"])
    dataset = _load_data(cfg)
    model, _ = _load_model(cfg, _checkpoint_path(args, cfg), dataset)
    digest = run_hash(cfg)
    h = min(cfg["horizons"])
    splits = chronological_split(dataset, tuple(cfg["ratios"]), model.cfg.window, h)
    if not splits.test:
        raise DataError("test split is empty")
    rows = solver_benchmark(model, splits.test, cfg["evaluation"]["solver_methods"],
                            solver_config(cfg), seed=cfg["seed"] + EVAL_SEED_OFFSET,
                            repeats=int(cfg["evaluation"]["solver_repeats"]))
    write_csv(out / "solvers.csv", ["method", "adaptive", "rmse", "mae", "seconds", "speedup"],
              [(r["method"], r["adaptive"], r["rmse"], r["mae"], r["seconds"],
                "" if r["speedup"] is None else r["speedup"]) for r in rows], digest)
    print(json.dumps({"solvers": str(out / "solvers.csv"), "config_hash": digest}))


def cmd_simulate(args, cfg):
    out = Path(cfg["out"])
    scenario = scenario_config(cfg)
    digest = run_hash(cfg)
    dataset = simulate_scenario(scenario)
    meta = dict(dataset.meta, config_hash=digest)
    write_dataset(dataset, out, meta)
    # a ready-to-use run config pointing at the files just written
    run = {"seed": cfg["seed"], "data": {k: v for k, v in DATA_FILES.items()}}
    _dump_json(out / "run.json", run)
    _dump_json(out / "simulate.json", {
        "config_hash": digest,
        "config": cfg,
        "files": sorted(DATA_FILES.values()) + ["meta.json", "run.json"],
        "n_regions": dataset.n_regions,
        "n_days": dataset.n_days,
        "hotspot_region": meta["hotspot_region"],
        "gamma": meta["gamma"],
    })
    print(json.dumps({"simulate": str(out / "simulate.json"), "config_hash": digest,
                      "hotspot_region": meta["hotspot_region"]}))


def cmd_export_gamma(args, cfg):
    out = Path(cfg["out"])
    path = _checkpoint_path(args, cfg)
    dataset = _load_data(cfg) if all(cfg["data"][k] for k in DATA_FILES) else None
    model, doc = _load_model(cfg, path, dataset)
    ids = doc.get("region_ids") or [f"region_{i}" for i in range(model.cfg.n_regions)]
    digest = run_hash(cfg)
    rows = export_gamma(model, ids)
    write_csv(out / "export-gamma.csv", ["region_id", "gamma"], rows, digest)
    top = max(rows, key=lambda r: r[1])
    print(json.dumps({"export_gamma": str(out / "export-gamma.csv"), "config_hash": digest,
                      "argmax": top[0], "max_gamma": top[1]}))


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "ablate": cmd_ablate,
    "solvers": cmd_solvers,
    "simulate": cmd_simulate,
    "export-gamma": cmd_export_gamma,
}


# -- entry point -------------------------------------------------------------

def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands must not reset options that were given before the command
    default = argparse.SUPPRESS if suppress else None
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default,
                        help="run configuration (JSON); unknown keys are rejected")
    common.add_argument("--out", default=default, help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, default=default,
                        help="run seed (overrides config 'seed')")
    common.add_argument("--data", default=default,
                        help="directory holding cases.csv, mobility.csv, centroids.csv")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epitransport", description=__doc__.splitlines()[0],
                                     parents=[_global_options(False)])
    common = _global_options(True)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fit a model and write model.ckpt.json, history.jsonl, config.json",
        "eval": "score a checkpoint on the test split for every horizon",
        "forecast": "forecast the days after --as-of",
        "ablate": "train the full model and six reduced variants",
        "solvers": "benchmark a checkpoint under each ODE solver",
        "simulate": "write a synthetic dataset with planted parameters",
        "export-gamma": "write the learned per-region reaction coefficients",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, parents=[common])
        if name == "train":
            p.add_argument("--resume", help="warm-start from this checkpoint")
        if name in ("eval", "forecast", "solvers", "export-gamma"):
            p.add_argument("--checkpoint", help="checkpoint path (default <out>/model.ckpt.json)")
        if name == "forecast":
            p.add_argument("--as-of", dest="as_of", help="last observed date (default: last date)")
            p.add_argument("--horizon", type=int, help="days to forecast (default max horizon)")
    return parser


def _setup_logging():
    name = os.environ.get("EPITRANSPORT_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"EPITRANSPORT_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    logging.captureWarnings(True)


def _fail(kind: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error[{kind}]: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args.config, args.out, args.seed, args.data)
        started = time.perf_counter()
        COMMANDS[args.command](args, cfg)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - started)
        return 0
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, GraphError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (TrainingDivergenceError, SolverError) as exc:
        return _fail("divergence", exc, EXIT_DIVERGED)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic line
        log.debug("unexpected failure", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
