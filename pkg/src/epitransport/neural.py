"""Learned components: GRU encoder, coefficient networks and the latent field.

Shapes used throughout::

    B  batch of forecast windows      N  regions
    K  latent samples per window      H  latent / hidden channels
    w  encoder window                 h  forecast horizon
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .odeint import SolverConfig, integrate
from .tape import Tensor, concat, values_of
from .transport import TERMS

CHECKPOINT_FORMAT = "epitransport-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int
    hidden: int = 16
    window: int = 7
    n_samples: int = 5
    input_dim: int = 1
    terms: tuple = TERMS
    conservative_advection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(t for t in TERMS if t in self.terms))
        if not self.terms:
            raise ValueError("at least one transport term must be active")
        if self.n_regions < 1 or self.hidden < 1 or self.window < 1 or self.n_samples < 1:
            raise ValueError(f"invalid model dimensions: {self}")


@dataclass(frozen=True)
class NormStats:
    """Per-region standardization and the mobility scale from the training span."""

    mean: np.ndarray
    std: np.ndarray
    mobility_scale: float = 1.0

    def normalize(self, x):
        return (np.asarray(x) - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, y):
        return np.asarray(y) * self.std[:, None] + self.mean[:, None]

    @classmethod
    def identity(cls, n_regions: int) -> "NormStats":
        return cls(np.zeros(n_regions), np.ones(n_regions), 1.0)


@dataclass
class LatentState:
    mean: Tensor
    logvar: Tensor
    samples: Tensor      # (..., K, N, H)
    epsilon: np.ndarray


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    H, D, N = cfg.hidden, cfg.input_dim, cfg.n_regions
    gru = 3 * H * (D + H + 2)
    heads = 2 * H * (H + 1)
    return gru + heads + 1 + N + H * (2 * H + 1)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    H, D, N = cfg.hidden, cfg.input_dim, cfg.n_regions

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    raw = {
        "gru.w_ih": uniform((D, 3 * H), D),
        "gru.w_hh": uniform((H, 3 * H), H),
        "gru.b_ih": uniform((3 * H,), H),
        "gru.b_hh": uniform((3 * H,), H),
        "head.mean.w": uniform((H, H), H),
        "head.mean.b": uniform((H,), H),
        "head.logvar.w": uniform((H, H), H),
        "head.logvar.b": uniform((H,), H),
        "coef.k_raw": np.zeros(1),
        "coef.gamma_raw": np.zeros(N),
        "mu.w": np.zeros((2 * H, H)),
        "mu.b": np.zeros(H),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


# -- encoder ---------------------------------------------------------------

def gru_step(x, h, p):
    """One GRU update; ``x`` is (..., D), ``h`` is (..., H)."""
    H = h.shape[-1]
    gi = x @ p["gru.w_ih"] + p["gru.b_ih"]
    gh = h @ p["gru.w_hh"] + p["gru.b_hh"]
    r = (gi[..., :H] + gh[..., :H]).sigmoid()
    z = (gi[..., H:2 * H] + gh[..., H:2 * H]).sigmoid()
    n = (gi[..., 2 * H:] + r * gh[..., 2 * H:]).tanh()
    return (1.0 - z) * n + z * h


def reparameterize(mean, logvar, epsilon):
    """``mean + exp(logvar / 2) * epsilon``; epsilon is a constant."""
    return mean + (logvar * 0.5).exp() * np.asarray(epsilon, dtype=np.float64)


def encode(window, params, rng_seed=None, n_samples: int = 5, epsilon=None) -> LatentState:
    """Run the shared GRU over each region's normalized window.

    ``window`` is (N, w) or (B, N, w). Samples have an extra K axis in front
    of the region axis. Pass ``epsilon`` to fix the reparameterization noise.
    """
    x = np.asarray(window, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise DataError("encoder input contains NaN")
    H = params["gru.w_hh"].shape[0]
    D = params["gru.w_ih"].shape[0]
    h = Tensor(np.zeros(x.shape[:-1] + (H,)))
    for step in range(x.shape[-1]):
        h = gru_step(x[..., step:step + 1].reshape(x.shape[:-1] + (D,)), h, params)
    mean = h @ params["head.mean.w"] + params["head.mean.b"]
    logvar = h @ params["head.logvar.w"] + params["head.logvar.b"]
    shape = x.shape[:-2] + (n_samples,) + x.shape[-2:-1] + (H,)
    if epsilon is None:
        epsilon = np.random.default_rng(rng_seed).standard_normal(shape)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != shape:
        raise ValueError(f"epsilon shape {epsilon.shape} != expected {shape}")
    samples = reparameterize(_expand_k(mean), _expand_k(logvar), epsilon)
    return LatentState(mean, logvar, samples, epsilon)


def _expand_k(t):
    return t.reshape(t.shape[:-2] + (1,) + t.shape[-2:])


# -- coefficient networks and latent field ---------------------------------

def diffusion_coef(params):
    return params["coef.k_raw"].softplus()


def reaction_coef(params):
    return params["coef.gamma_raw"].sigmoid()


def fuse_mu(dif_repr, adv_repr, w, b):
    """Fusion weight ``sigmoid([dif, adv] @ w + b)`` per region and channel."""
    if tuple(dif_repr.shape) != tuple(adv_repr.shape):
        raise ValueError(f"shape mismatch {dif_repr.shape} vs {adv_repr.shape}")
    return (concat([dif_repr, adv_repr], axis=-1) @ w + b).sigmoid()


def latent_field(z, laplacian, mobility_t, params, terms=TERMS, conservative=False):
    """Fused diffusion-advection-reaction rate of a latent state ``z`` (..., N, H).

    ``mobility_t`` holds flows ``M[i, j]`` from i to j, broadcastable to
    (..., N, N). Disabled branches are dropped and ``mu`` is pinned so the
    surviving inter-regional branch keeps full weight.
    """
    use_dif, use_adv = "dif" in terms, "adv" in terms
    out = None
    if use_dif:
        dif = -(diffusion_coef(params) * (laplacian @ z))
    if use_adv:
        M = np.asarray(mobility_t, dtype=np.float64)
        adv = np.swapaxes(M, -1, -2) @ z
        if conservative:
            adv = adv - M.sum(axis=-1, keepdims=True) * z
    if use_dif or use_adv:
        if use_dif and use_adv:
            mu = fuse_mu(dif, adv, params["mu.w"], params["mu.b"])
            out = mu * dif - (1.0 - mu) * adv
        elif use_dif:
            out = dif
        else:
            out = -adv
    if "rea" in terms:
        rea = reaction_coef(params).reshape(-1, 1) * z
        out = rea if out is None else out + rea
    return out


# -- decoder ---------------------------------------------------------------

def decode(trajectory, norm: NormStats, clamp: bool = True):
    """Average samples, sum channels and de-normalize.

    ``trajectory`` is (h, ..., K, N, H) without the initial state; returns
    (..., N, h).
    """
    if trajectory.shape[0] == 0:
        raise ValueError("empty trajectory")
    y = trajectory.mean(axis=-3).sum(axis=-1)          # (h, ..., N)
    y = y.swapaxes(0, -1) if y.ndim == 2 else _move_time_last(y)
    y = y * norm.std[:, None] + norm.mean[:, None]
    if clamp:
        y = y.clamp_min(0.0) if isinstance(y, Tensor) else np.maximum(y, 0.0)
    return y


def _move_time_last(y):
    # (h, B, N) -> (B, N, h)
    return y.swapaxes(0, 1).swapaxes(1, 2)


# -- full model --------------------------------------------------------------

@dataclass
class TransportForecaster:
    cfg: ModelConfig
    laplacian: np.ndarray
    norm: NormStats
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, laplacian, norm: NormStats, seed: int = 0):
        return cls(cfg, np.asarray(laplacian, dtype=np.float64), norm, init_params(cfg, seed))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def gamma(self) -> np.ndarray:
        return values_of(reaction_coef(self.params)).copy()

    def diffusion_k(self) -> float:
        return float(values_of(diffusion_coef(self.params))[0])

    def forward(self, windows, mobility, epsilon, solver: SolverConfig | None = None,
                clamp: bool = True):
        """Forecast a batch.

        ``windows`` (B, N, w) normalized cases, ``mobility`` (B, h, N, N)
        normalized flows for the forecast days, ``epsilon`` (B, K, N, H).
        Returns raw-scale predictions (B, N, h).
        """
        windows = np.asarray(windows, dtype=np.float64)
        mobility = np.asarray(mobility, dtype=np.float64)
        if windows.shape[-1] != self.cfg.window:
            raise ValueError(f"window length {windows.shape[-1]} != {self.cfg.window}")
        state = encode(windows, self.params, n_samples=self.cfg.n_samples, epsilon=epsilon)
        traj = self.integrate_latent(state.samples, mobility, solver)
        return decode(traj, self.norm, clamp=clamp)

    def integrate_latent(self, z0, mobility, solver: SolverConfig | None = None):
        """Integrate one day at a time, holding that day's mobility fixed."""
        from .tape import stack

        solver = solver or SolverConfig()
        horizon = mobility.shape[1]
        z, states = z0, []
        for day in range(horizon):
            m_day = mobility[:, day][:, None]            # (B, 1, N, N)

            def rate(t, y, m_day=m_day):
                return latent_field(y, self.laplacian, m_day, self.params,
                                    self.cfg.terms, self.cfg.conservative_advection)

            z = integrate(rate, z, [float(day), float(day + 1)], solver)[-1]
            states.append(z)
        return stack(states, axis=0) if isinstance(z, Tensor) else np.stack(states)


# -- checkpoints -------------------------------------------------------------

def _b64(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def checkpoint_dict(model: TransportForecaster, config: dict | None = None,
                    region_ids=None) -> dict:
    config = config or {}
    mcfg = asdict(model.cfg)
    mcfg["terms"] = list(model.cfg.terms)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "model": mcfg,
        "region_ids": list(region_ids) if region_ids is not None else None,
        "laplacian": {"shape": list(model.laplacian.shape), "data": _b64(model.laplacian)},
        "norm": {
            "mean": _b64(model.norm.mean),
            "std": _b64(model.norm.std),
            "mobility_scale": float(model.norm.mobility_scale),
        },
        "params": {
            name: {"shape": list(p.shape), "data": _b64(p.value)}
            for name, p in model.params.items()
        },
    }


def save_checkpoint(path, model: TransportForecaster, config: dict | None = None,
                    region_ids=None) -> None:
    doc = checkpoint_dict(model, config, region_ids)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> tuple[TransportForecaster, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an epitransport checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    m = dict(doc["model"])
    m["terms"] = tuple(m["terms"])
    cfg = ModelConfig(**m)
    n = cfg.n_regions
    lap = _unb64(doc["laplacian"]["data"], doc["laplacian"]["shape"])
    norm = NormStats(_unb64(doc["norm"]["mean"], (n,)), _unb64(doc["norm"]["std"], (n,)),
                     float(doc["norm"]["mobility_scale"]))
    params = {
        name: Tensor(_unb64(e["data"], e["shape"]), requires_grad=True, name=name)
        for name, e in doc["params"].items()
    }
    return TransportForecaster(cfg, lap, norm, params), doc
