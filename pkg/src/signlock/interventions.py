"""Sign-stabilizing and sign-destabilizing mechanisms: gap initialization,
low-rank sign templates, hard projection, the outer-drift log barrier and
the inward l1 pull used to induce floating signs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .numerics import RandomSource, derive_seed

A_INIT_GRID = (0.001, 0.005, 0.02, 0.03, 0.05)
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3, 0.5)
MAX_GAP_SIGMAS = 6.0
DEFAULT_EPS_LB = 1e-8
DEFAULT_RHO_F = 1e-2
TEMPLATE_DISTS = ("gaussian", "uniform")


@dataclass(frozen=True)
class GapInitConfig:
    sigma_init: float = 0.02
    a_init: float = 0.0

    def __post_init__(self):
        if not self.sigma_init > 0:
            raise ConfigError(f"sigma_init must be positive, got {self.sigma_init}")
        if not (math.isfinite(self.a_init) and self.a_init >= 0):
            raise ConfigError(f"a_init must be finite and nonnegative, got {self.a_init}")
        if self.a_init > MAX_GAP_SIGMAS * self.sigma_init:
            raise ConfigError(
                f"a_init={self.a_init} exceeds {MAX_GAP_SIGMAS} sigma; rejection sampling would stall")

    @classmethod
    def from_c_gap(cls, sigma_init: float, c_gap: float) -> "GapInitConfig":
        return cls(sigma_init, c_gap * sigma_init)


@dataclass(frozen=True)
class TemplateConfig:
    rank: int = 2
    seed: int = 0
    dist: str = "gaussian"

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"template rank must be >= 1, got {self.rank}")
        if self.dist not in TEMPLATE_DISTS:
            raise ConfigError(f"template dist must be one of {TEMPLATE_DISTS}, got {self.dist!r}")


@dataclass(frozen=True)
class BarrierConfig:
    a_init: float = 0.02
    eps_lb: float = DEFAULT_EPS_LB
    lambda0: float = 0.0
    T: int = 1

    def __post_init__(self):
        if not self.a_init > 0 or not self.eps_lb > 0:
            raise ConfigError("barrier needs a_init > 0 and eps_lb > 0")
        if self.lambda0 < 0 or self.T < 1:
            raise ConfigError("barrier needs lambda0 >= 0 and T >= 1")


@dataclass(frozen=True)
class FloatingConfig:
    rho_f: float = DEFAULT_RHO_F
    lambda_float: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.rho_f) and self.rho_f > 0):
            raise ConfigError(f"rho_f must be positive and finite, got {self.rho_f}")
        if self.lambda_float < 0:
            raise ConfigError("lambda_float must be nonnegative")


def _shape(m: int, n: int) -> None:
    if m < 1 or n < 1:
        raise ConfigError(f"matrix dimensions must be positive, got {m}x{n}")


def _gap_magnitudes(size: int, cfg: GapInitConfig, rng: RandomSource) -> np.ndarray:
    out = np.empty(size)
    filled = 0
    rounds = 0
    while filled < size:
        z = rng.normal(max(2 * (size - filled), 64), sigma=cfg.sigma_init)
        z = z[np.abs(z) >= cfg.a_init][: size - filled]
        out[filled:filled + z.size] = z
        filled += z.size
        rounds += 1
        if rounds > 10_000:
            raise NumericError("gap initialization did not terminate")
    return out


def gap_init(m: int, n: int, cfg: GapInitConfig, rng: RandomSource) -> np.ndarray:
    """N(0, sigma^2) entries conditioned on |z| >= a_init, by rejection."""
    _shape(m, n)
    return _gap_magnitudes(m * n, cfg, rng).reshape(m, n)


def template_seed(global_seed: int, layer: str) -> int:
    return derive_seed(global_seed, f"template/{layer}")


def make_template(m: int, n: int, cfg: TemplateConfig) -> np.ndarray:
    """sign(G H^T) for random m x r and n x r factors, with sign(0) = +1."""
    _shape(m, n)
    if cfg.rank > min(m, n):
        raise ConfigError(f"template rank {cfg.rank} exceeds min({m}, {n})")
    rng = RandomSource(cfg.seed)
    if cfg.dist == "gaussian":
        G = rng.normal((m, cfg.rank))
        H = rng.normal((n, cfg.rank))
    else:
        G = rng.uniform((m, cfg.rank), -1.0, 1.0)
        H = rng.uniform((n, cfg.rank), -1.0, 1.0)
    return np.where(G @ H.T >= 0, 1, -1).astype(np.int8)


def template_gap_init(T, cfg: GapInitConfig, rng: RandomSource) -> np.ndarray:
    """T * |Z| with Z drawn as in :func:`gap_init`."""
    T = np.asarray(T)
    if T.ndim != 2:
        raise ConfigError("template must be a matrix")
    return T * np.abs(gap_init(T.shape[0], T.shape[1], cfg, rng))


def hard_project(W, T) -> np.ndarray:
    W = np.asarray(W)
    T = np.asarray(T)
    if W.shape != T.shape:
        raise ConfigError(f"shape mismatch: weights {W.shape} vs template {T.shape}")
    return T * np.abs(W)


def barrier_penalty(W, a_init: float, eps_lb: float = DEFAULT_EPS_LB) -> tuple[float, np.ndarray]:
    """Mean of ln max(1, a / (|w| + eps_lb)) and its (sub)gradient."""
    if not a_init > 0 or not eps_lb > 0:
        raise ConfigError("barrier needs a_init > 0 and eps_lb > 0")
    W = np.asarray(W, dtype=np.float64)
    shifted = np.abs(W) + eps_lb
    active = shifted < a_init
    value = float(np.sum(np.log(a_init / shifted[active]))) / W.size
    grad = np.zeros_like(W)
    grad[active] = -np.sign(W[active]) / (W.size * shifted[active])
    return value, grad


def floating_penalty(W, rho_f: float = DEFAULT_RHO_F) -> tuple[float, np.ndarray]:
    """Mean of min(|w|, rho_f) and its (sub)gradient."""
    if not (math.isfinite(rho_f) and rho_f > 0):
        raise ConfigError(f"rho_f must be positive and finite, got {rho_f}")
    W = np.asarray(W, dtype=np.float64)
    a = np.abs(W)
    value = float(np.sum(np.minimum(a, rho_f))) / W.size
    grad = np.where(a < rho_f, np.sign(W), 0.0) / W.size
    return value, grad


def lambda_at(t: int, cfg: BarrierConfig) -> float:
    """lambda0 for the first half of training, then a linear ramp to 0 at T."""
    if not 0 <= t < cfg.T:
        raise ConfigError(f"step {t} outside [0, {cfg.T})")
    half = cfg.T / 2.0
    if t < half:
        return cfg.lambda0
    return cfg.lambda0 * (cfg.T - t) / (cfg.T - half)
