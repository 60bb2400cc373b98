"""Rectifier MLP with softmax cross-entropy, float64 forward and backward."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigError
from ..numerics import RandomSource

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    """Hidden widths plus init scale; input and output widths come from the data."""

    hidden: tuple[int, ...] = (256, 256)
    init_sigma: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ConfigError("model needs at least one hidden layer")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if not self.init_sigma > 0:
            raise ConfigError(f"init_sigma must be positive, got {self.init_sigma}")

    def sizes(self, n_in: int, n_out: int) -> list[int]:
        if n_in < 1 or n_out < 1:
            raise ConfigError("input and output widths must be positive")
        return [n_in, *self.hidden, n_out]


def layer_names(n_layers: int) -> list[str]:
    return [f"fc{i + 1}" for i in range(n_layers)]


def weight_names(params: Params) -> list[str]:
    """Matrix-shaped parameters in layer order."""
    return [k for k in params if params[k].ndim == 2]


def init_params(sizes: list[int], sigma: float, rng: RandomSource,
                weight_init: Callable[[str, int, int], np.ndarray] | None = None) -> Params:
    """W stored as (out, in). ``weight_init(name, out, in)`` overrides the Gaussian draw."""
    params: Params = {}
    for name, (n_in, n_out) in zip(layer_names(len(sizes) - 1), zip(sizes, sizes[1:])):
        key = f"{name}.weight"
        if weight_init is not None:
            W = np.asarray(weight_init(key, n_out, n_in), dtype=np.float64)
        else:
            W = rng.fork(key).normal((n_out, n_in), sigma=sigma)
        params[key] = W
        params[f"{name}.bias"] = np.zeros(n_out)
    return params


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: Params, X: np.ndarray) -> np.ndarray:
    h = X
    names = layer_names(len(params) // 2)
    for i, name in enumerate(names):
        h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
        if i < len(names) - 1:
            h = np.maximum(h, 0.0)
    return h


def loss(params: Params, X: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(forward(params, X))
    return float(-logp[np.arange(len(y)), y].mean())


def forward_backward(params: Params, X: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    names = layer_names(len(params) // 2)
    n_in = params[f"{names[0]}.weight"].shape[1]
    n_out = params[f"{names[-1]}.weight"].shape[0]
    if X.ndim != 2 or X.shape[1] != n_in:
        raise ConfigError(f"input batch has shape {X.shape}, model expects (*, {n_in})")
    if y.shape != (X.shape[0],) or (y.size and (y.min() < 0 or y.max() >= n_out)):
        raise ConfigError("labels do not match the batch or the output width")

    acts = [X]
    h = X
    for i, name in enumerate(names):
        h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
        if i < len(names) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)

    B = X.shape[0]
    logp = _log_softmax(acts[-1])
    value = float(-logp[np.arange(B), y].mean())

    delta = np.exp(logp)
    delta[np.arange(B), y] -= 1.0
    delta /= B
    grads: Params = {}
    for i in range(len(names) - 1, -1, -1):
        name = names[i]
        grads[f"{name}.weight"] = delta.T @ acts[i]
        grads[f"{name}.bias"] = delta.sum(axis=0)
        if i:
            delta = (delta @ params[f"{name}.weight"]) * (acts[i] > 0)
    return value, {k: grads[k] for k in params}


@dataclass
class Model:
    spec: ModelSpec
    sizes: list[int]
    params: Params = field(repr=False)

    def predict(self, X) -> np.ndarray:
        return forward(self.params, np.asarray(X, dtype=np.float64)).argmax(axis=1)
