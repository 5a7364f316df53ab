"""Mini-batch Adam training with multi-step decay and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Splits, stack_samples
from .metrics import rmse
from .neural import ModelConfig, TransportForecaster
from .odeint import SolverConfig
from .tape import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, best_params=None):
        super().__init__(message)
        self.best_params = best_params


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-2
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    milestones: tuple = (25, 35, 45, 55)
    lr_gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_samples: int = 5
    hidden: int = 16
    window: int = 7

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: decayed once per milestone reached."""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_gamma ** passed


def rmse_loss(pred, target):
    """Per-window ``sqrt(mean_h ||x_k - x_hat_k||^2)``, averaged over the batch.

    ``pred`` and ``target`` are (N, h) or (B, N, h); ``pred`` may be a Tensor.
    """
    target = np.asarray(target, dtype=np.float64)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {target.shape}")
    d = pred - target
    per_window = (d * d).sum(axis=-2).mean(axis=-1)
    if isinstance(per_window, Tensor):
        return per_window.sqrt().mean()
    return float(np.mean(np.sqrt(per_window)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params[name].value``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(name, np.zeros_like(p.value))
        v = state.v.get(name, np.zeros_like(p.value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def eval_epsilon(seed: int, anchor: int, cfg: ModelConfig) -> np.ndarray:
    """Frozen reparameterization noise for one evaluation window."""
    rng = np.random.default_rng([seed, anchor])
    return rng.standard_normal((cfg.n_samples, cfg.n_regions, cfg.hidden))


def predict(model: TransportForecaster, samples, solver: SolverConfig | None = None,
            seed: int = 0, batch_size: int = 64, clamp: bool = True) -> np.ndarray:
    """Raw-scale forecasts (B, N, h) with frozen, per-window noise."""
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            windows, mobility, _ = stack_samples(chunk)
            eps = np.stack([eval_epsilon(seed, s.anchor_t, model.cfg) for s in chunk])
            pred = model.forward(windows, mobility, eps, solver, clamp=clamp)
            out.append(pred.value)
    return np.concatenate(out, axis=0)


def evaluate_rmse(model, samples, solver=None, seed: int = 0) -> float:
    pred = predict(model, samples, solver, seed)
    return rmse(np.stack([s.target for s in samples]), pred)


def batch_loss(model: TransportForecaster, samples, epsilon, solver=None):
    windows, mobility, targets = stack_samples(samples)
    # unclamped so that negative forecasts still receive gradient
    pred = model.forward(windows, mobility, epsilon, solver, clamp=False)
    return rmse_loss(pred, targets)


@dataclass
class TrainResult:
    model: TransportForecaster
    history: list
    best_epoch: int
    best_val_rmse: float


def _snapshot(params):
    return {k: p.value.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, v in snap.items():
        params[k].value = v.copy()


def train(model: TransportForecaster, splits: Splits, cfg: TrainConfig,
          history_path=None, eval_seed: int | None = None) -> TrainResult:
    """Fit ``model`` in place and return it restored to its best validation epoch."""
    if not splits.train or not splits.val:
        raise ValueError("training needs non-empty train and validation splits")
    rng = np.random.default_rng(cfg.seed)
    eval_seed = cfg.seed + 1 if eval_seed is None else eval_seed
    state = AdamState()
    mcfg = model.cfg
    history = []
    best = (math.inf, 0, _snapshot(model.params))
    stale = 0
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(cfg.max_epochs):
            started = time.perf_counter()
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(splits.train))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                chunk = [splits.train[j] for j in order[i:i + cfg.batch_size]]
                eps = rng.standard_normal((len(chunk), mcfg.n_samples, mcfg.n_regions,
                                           mcfg.hidden))
                loss = batch_loss(model, chunk, eps, cfg.solver)
                if not math.isfinite(float(loss.value)):
                    _restore(model.params, best[2])
                    raise TrainingDivergenceError(
                        f"loss became non-finite in epoch {epoch + 1}", best[2])
                loss.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value))
                         for k, p in model.params.items()}
                for p in model.params.values():
                    p.zero_grad()
                try:
                    adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                except TrainingDivergenceError as exc:
                    _restore(model.params, best[2])
                    exc.best_params = best[2]
                    raise
                losses.append(float(loss.value) * len(chunk))
            train_loss = sum(losses) / len(splits.train)
            val = evaluate_rmse(model, splits.val, cfg.solver, eval_seed)
            record = {"epoch": epoch + 1, "train_loss": train_loss, "val_rmse": val,
                      "lr": lr, "seconds": round(time.perf_counter() - started, 4)}
            history.append(record)
            if fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()
            log.info("epoch %d train_loss=%.4f val_rmse=%.4f lr=%.2e",
                     epoch + 1, train_loss, val, lr)
            if val < best[0]:
                best = (val, epoch + 1, _snapshot(model.params))
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after epoch %d (best %d)", epoch + 1, best[1])
                    break
    finally:
        if fh:
            fh.close()
    _restore(model.params, best[2])
    return TrainResult(model, history, best[1], best[0])


def fit(splits: Splits, graph, cfg: TrainConfig, terms=None, conservative: bool = False,
        history_path=None) -> TrainResult:
    """Build a fresh model for ``splits`` and train it."""
    from .transport import TERMS

    n = splits.train[0].input_window.shape[0]
    mcfg = ModelConfig(n_regions=n, hidden=cfg.hidden, window=cfg.window,
                       n_samples=cfg.n_samples, terms=tuple(terms or TERMS),
                       conservative_advection=conservative)
    model = TransportForecaster.create(mcfg, graph.laplacian_norm, splits.stats, seed=cfg.seed)
    return train(model, splits, cfg, history_path=history_path)


def load_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
