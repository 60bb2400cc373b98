"""SGD and AdamW with decoupled weight decay, plus global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

OPTIMIZERS = ("sgd", "adamw")


@dataclass(frozen=True)
class OptimConfig:
    name: str = "adamw"
    lr: float = 3e-4
    schedule: str = "constant"
    warmup: int = 0
    gamma: float = 0.999
    power: float = 0.5
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float | None = None

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.name!r}; expected one of {OPTIMIZERS}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.momentum < 1):
            raise ConfigError("betas and momentum must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay nonnegative")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class SGD:
    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr: float) -> None:
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for k, g in grads.items():
            if wd:
                params[k] *= 1.0 - lr * wd
            if mu:
                v = self.velocity.setdefault(k, np.zeros_like(g))
                v *= mu
                v += g
                g = v
            params[k] -= lr * g


class AdamW:
    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                params[k] *= 1.0 - lr * c.weight_decay
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def make_optimizer(cfg: OptimConfig):
    return SGD(cfg) if cfg.name == "sgd" else AdamW(cfg)
