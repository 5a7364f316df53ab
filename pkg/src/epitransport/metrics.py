"""Point-forecast error metrics on raw case counts."""

from __future__ import annotations

import numpy as np


def _residuals(x, x_hat) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.size} vs {x_hat.size}")
    if x.size == 0:
        raise ValueError("metrics need at least one value")
    return x - x_hat


def mae(x, x_hat) -> float:
    return float(np.mean(np.abs(_residuals(x, x_hat))))


def rmse(x, x_hat) -> float:
    r = _residuals(x, x_hat)
    return float(np.sqrt(np.mean(r * r)))


def per_region_mean(metric, x, x_hat) -> float:
    """Apply ``metric`` per region (axis -2 of ``(..., N, h)``) and average."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    n = x.shape[-2]
    return float(np.mean([metric(x[..., i, :], x_hat[..., i, :]) for i in range(n)]))
