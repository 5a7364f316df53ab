"""Explicit Runge-Kutta integrators that stay on the autodiff tape.

States may be numpy arrays or :class:`~epitransport.tape.Tensor`. Every
stage combination goes through :func:`~epitransport.tape.lincomb`, so
gradients of the trajectory are exact for the discrete scheme that was
actually run (step sizes chosen by the controller are treated as constants).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tape import Tensor, lincomb, stack, values_of

METHODS = ("euler", "bosh3", "rk4", "dopri5")


class SolverError(RuntimeError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, message, t_reached):
        super().__init__(message)
        self.t_reached = t_reached


class DivergenceError(SolverError):
    pass


@dataclass(frozen=True)
class Tableau:
    c: tuple
    a: tuple          # lower-triangular rows, row i has i entries
    b: tuple          # propagating weights
    b_err: tuple | None = None   # b - b_embedded, for embedded pairs
    order: int = 1
    err_order: int | None = None
    fsal: bool = False


EULER = Tableau(c=(0.0,), a=((),), b=(1.0,), order=1)

RK4 = Tableau(
    c=(0.0, 0.5, 0.5, 1.0),
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    order=4,
)

_BS_B = (2 / 9, 1 / 3, 4 / 9, 0.0)
_BS_BHAT = (7 / 24, 1 / 4, 1 / 3, 1 / 8)
BOSH3 = Tableau(
    c=(0.0, 0.5, 0.75, 1.0),
    a=((), (0.5,), (0.0, 0.75), _BS_B[:3]),
    b=_BS_B,
    b_err=tuple(x - y for x, y in zip(_BS_B, _BS_BHAT)),
    order=3,
    err_order=2,
    fsal=True,
)

_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_BHAT = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
DOPRI5 = Tableau(
    c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    a=(
        (),
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        _DP_B[:6],
    ),
    b=_DP_B,
    b_err=tuple(x - y for x, y in zip(_DP_B, _DP_BHAT)),
    order=5,
    err_order=4,
    fsal=True,
)

TABLEAUS = {"euler": EULER, "bosh3": BOSH3, "rk4": RK4, "dopri5": DOPRI5}


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    fixed_dt: float = 0.1
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10_000
    safety: float = 0.9
    # embedded pairs only; False runs bosh3/dopri5 at fixed_dt
    adaptive: bool = True

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ValueError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.fixed_dt > 0:
            raise ValueError("fixed_dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")

    @property
    def is_adaptive(self) -> bool:
        return self.adaptive and TABLEAUS[self.method].b_err is not None

    def with_method(self, method: str) -> "SolverConfig":
        return replace(self, method=method)


def _rk_stages(field, t, y, dt, tab: Tableau, k1=None, n_stages=None):
    n_stages = len(tab.c) if n_stages is None else n_stages
    ks = [field(t, y) if k1 is None else k1]
    for i in range(1, n_stages):
        yi = lincomb(y, [dt * a for a in tab.a[i]], ks)
        ks.append(field(t + tab.c[i] * dt, yi))
    return ks


def _check_finite(y, t):
    if not np.all(np.isfinite(values_of(y))):
        raise DivergenceError(f"non-finite state at t={t:.6g}")


def _pack(states):
    if isinstance(states[0], Tensor):
        return stack(states, axis=0)
    return np.stack([np.asarray(s, dtype=np.float64) for s in states], axis=0)


def integrate(field, y0, t_eval, cfg: SolverConfig | None = None):
    """Integrate ``dy/dt = field(t, y)`` and return states at ``t_eval``.

    The result has a leading time axis with ``result[0] == y0``. Steps are
    clipped so that every requested time is hit exactly.
    """
    cfg = cfg or SolverConfig()
    t_eval = [float(t) for t in t_eval]
    if len(t_eval) < 1 or any(b <= a for a, b in zip(t_eval, t_eval[1:])):
        raise ValueError("t_eval must be strictly increasing")
    if not isinstance(y0, Tensor):
        y0 = np.asarray(y0, dtype=np.float64)
    _check_finite(y0, t_eval[0])
    if cfg.is_adaptive:
        states = _integrate_adaptive(field, y0, t_eval, cfg)
    else:
        states = _integrate_fixed(field, y0, t_eval, cfg)
    return _pack(states)


def _integrate_fixed(field, y0, t_eval, cfg):
    tab = TABLEAUS[cfg.method]
    # trailing stages with zero weight (FSAL slot) are not needed without error control
    n_stages = max(i for i, b in enumerate(tab.b) if b != 0.0) + 1
    states, y, steps = [y0], y0, 0
    for a, b in zip(t_eval, t_eval[1:]):
        n = max(1, math.ceil((b - a) / cfg.fixed_dt - 1e-9))
        h = (b - a) / n
        for i in range(n):
            steps += 1
            if steps > cfg.max_steps:
                raise NonConvergenceError(
                    f"exceeded max_steps={cfg.max_steps}", a + i * h)
            t = a + i * h
            ks = _rk_stages(field, t, y, h, tab, n_stages=n_stages)
            y = lincomb(y, [h * w for w in tab.b[:n_stages]], ks)
            _check_finite(y, t + h)
        states.append(y)
    return states


def _error_ratio(y, y_new, err, cfg) -> float:
    yv, ynv, ev = values_of(y), values_of(y_new), values_of(err)
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(yv), np.abs(ynv))
    return float(np.max(np.abs(ev) / scale))


def _integrate_adaptive(field, y0, t_eval, cfg):
    tab = TABLEAUS[cfg.method]
    expo = 1.0 / (tab.err_order + 1)
    states, y, t = [y0], y0, t_eval[0]
    dt = (t_eval[-1] - t_eval[0]) / 10.0
    k1 = None
    attempts = 0
    for target in t_eval[1:]:
        while t < target:
            span = target - t
            clipped = dt >= span * (1 - 1e-12)
            h = span if clipped else dt
            attempts += 1
            if attempts > cfg.max_steps:
                raise NonConvergenceError(
                    f"exceeded max_steps={cfg.max_steps} at t={t:.6g}", t)
            ks = _rk_stages(field, t, y, h, tab, k1=k1)
            y_new = lincomb(y, [h * w for w in tab.b], ks)
            err = lincomb(np.zeros_like(values_of(y)), [h * w for w in tab.b_err],
                          [values_of(k) for k in ks])
            ratio = _error_ratio(y, y_new, err, cfg)
            if not math.isfinite(ratio):
                raise DivergenceError(f"non-finite error estimate at t={t:.6g}")
            if ratio == 0.0:
                factor = 5.0
            else:
                factor = min(5.0, max(0.2, cfg.safety * ratio ** -expo))
            if ratio <= 1.0:
                _check_finite(y_new, t + h)
                y = y_new
                t = target if clipped else t + h
                k1 = ks[-1] if tab.fsal else None
                dt = max(dt, h * factor) if clipped else h * factor
            else:
                dt = h * factor
                k1 = ks[0]
        states.append(y)
    return states


def convergence_order(method: str, dt: float = 0.1, t_end: float = 1.0) -> float:
    """Observed order on ``dy/dt = -y`` from one halving of a fixed step."""
    cfg = SolverConfig(method=method, adaptive=False)
    exact = math.exp(-t_end)

    def err(step):
        traj = integrate(lambda t, y: -y, np.array([1.0]), [0.0, t_end],
                         replace(cfg, fixed_dt=step))
        return abs(float(traj[-1][0]) - exact)

    return math.log2(err(dt) / err(dt / 2))
