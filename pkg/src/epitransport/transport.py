"""Discrete diffusion, advection and reaction rates on a region graph.

All operators act on states shaped ``(..., N, C)``: the region axis is
second to last and every trailing channel is transported independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TERMS = ("dif", "adv", "rea")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TransportCoefficients:
    """Diffusion scale ``k``, per-region reaction ``gamma`` and fusion weight ``mu``."""

    k: float
    gamma: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        if not self.k >= 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        # closed interval: branch-isolation settings use the endpoints
        if np.any((gamma < 0) | (gamma > 1)):
            raise ValueError("gamma components must lie in [0, 1]")
        if np.any((mu < 0) | (mu > 1)):
            raise ValueError("mu components must lie in [0, 1]")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "mu", mu)


def _check_state(L_or_M: np.ndarray, X: np.ndarray, name: str) -> None:
    if L_or_M.ndim < 2 or L_or_M.shape[-1] != L_or_M.shape[-2]:
        raise ShapeError(f"{name} must be square, got {L_or_M.shape}")
    if X.ndim < 2 or X.shape[-2] != L_or_M.shape[-1]:
        raise ShapeError(f"state shape {X.shape} does not match {name} {L_or_M.shape}")


def diffusion_rate(L, X, k: float) -> np.ndarray:
    """``-k * L @ X``; zero for spatially uniform X when L is combinatorial."""
    L = np.asarray(L, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_state(L, X, "Laplacian")
    return -k * (L @ X)


def advection_rate(M, X, conservative: bool = False) -> np.ndarray:
    """Mobility-driven transport, with ``M[i, j]`` the flow from region i to j.

    The default form returns the inflow ``M^T X``. With ``conservative`` the
    outflow ``(sum_j M[i, j]) X_i`` is subtracted, so the rate sums to zero
    over regions.
    """
    M = np.asarray(M, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_state(M, X, "mobility")
    if np.any(M < 0):
        raise ValueError("mobility entries must be non-negative")
    inflow = np.swapaxes(M, -1, -2) @ X
    if not conservative:
        return inflow
    outflow = M.sum(axis=-1, keepdims=True) * X
    return inflow - outflow


def reaction_rate(X, gamma) -> np.ndarray:
    """Per-region linear growth ``gamma[i] * X[i, c]``."""
    X = np.asarray(X, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[-1] != X.shape[-2]:
        raise ShapeError(f"gamma length {gamma.shape[-1]} != regions {X.shape[-2]}")
    return gamma[..., :, None] * X


def pinned_mu(mu, terms=TERMS):
    """Pin the fusion weight when only one inter-regional branch is active."""
    if "dif" in terms and "adv" not in terms:
        return np.ones_like(np.asarray(mu, dtype=np.float64))
    if "adv" in terms and "dif" not in terms:
        return np.zeros_like(np.asarray(mu, dtype=np.float64))
    return mu


def dar_rate(L, M, X, coeffs: TransportCoefficients, conservative: bool = False,
             terms=TERMS) -> np.ndarray:
    """Fused field ``mu*(-k L X) - (1-mu)*(adv) + gamma*X``.

    ``terms`` selects the active branches; a disabled branch is dropped
    entirely, so the result does not depend on its inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = pinned_mu(coeffs.mu, terms)
    out = np.zeros_like(X)
    if "dif" in terms:
        out = out + mu * diffusion_rate(L, X, coeffs.k)
    if "adv" in terms:
        out = out - (1.0 - mu) * advection_rate(M, X, conservative)
    if "rea" in terms:
        out = out + reaction_rate(X, coeffs.gamma)
    return out
