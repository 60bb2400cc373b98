"""Synthetic builtin tasks with a contiguous 90/10 train/validation split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..numerics import RandomSource

DATASETS = ("gaussian_clusters", "char_window")
TRAIN_FRACTION = 0.9


@dataclass(frozen=True)
class DataConfig:
    kind: str = "char_window"
    # char_window
    vocab: int = 32
    window: int = 8
    motifs: int = 24
    motif_min: int = 4
    motif_max: int = 12
    length: int = 20000
    noise: float = 0.05
    # gaussian_clusters
    clusters: int = 10
    dim: int = 784
    samples: int = 20000
    spread: float = 3.0

    def __post_init__(self):
        if self.kind not in DATASETS:
            raise ConfigError(f"unknown dataset {self.kind!r}; expected one of {DATASETS}")
        if self.kind == "char_window":
            if not 2 <= self.vocab <= 64:
                raise ConfigError(f"vocab must lie in [2, 64], got {self.vocab}")
            if self.window < 1:
                raise ConfigError(f"window must be positive, got {self.window}")
            if not 1 <= self.motif_min <= self.motif_max or self.motifs < 1:
                raise ConfigError("need motifs >= 1 and 1 <= motif_min <= motif_max")
            if not 0 <= self.noise <= 1:
                raise ConfigError(f"noise rate must lie in [0, 1], got {self.noise}")
            if self.length < self.window + 10:
                raise ConfigError("corpus too short for the window")
        else:
            if self.clusters < 2 or self.dim < 1 or self.samples < 10:
                raise ConfigError("need clusters >= 2, dim >= 1, samples >= 10")
            if not self.spread > 0:
                raise ConfigError("spread must be positive")


@dataclass
class Dataset:
    X_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    X_val: np.ndarray = field(repr=False)
    y_val: np.ndarray = field(repr=False)
    n_in: int
    n_out: int


def split_contiguous(n: int, frac: float = TRAIN_FRACTION) -> int:
    """Index where validation starts."""
    return int(round(n * frac))


def char_corpus(cfg: DataConfig, rng: RandomSource) -> np.ndarray:
    """Motifs drawn once, then concatenated in random order; each symbol is
    replaced by a uniform one with probability ``noise``."""
    mrng = rng.fork("motifs")
    lengths = mrng.integers(cfg.motif_min, cfg.motif_max + 1, size=cfg.motifs)
    motifs = [mrng.integers(0, cfg.vocab, size=int(n)) for n in lengths]
    orng = rng.fork("order")
    pieces, total = [], 0
    while total < cfg.length:
        m = motifs[int(orng.integers(0, cfg.motifs))]
        pieces.append(m)
        total += m.size
    corpus = np.concatenate(pieces)[: cfg.length].astype(np.int64)
    if cfg.noise > 0:
        nrng = rng.fork("noise")
        hit = nrng.uniform(cfg.length) < cfg.noise
        corpus[hit] = nrng.integers(0, cfg.vocab, size=int(hit.sum()))
    return corpus


def char_windows(corpus: np.ndarray, vocab: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    n = corpus.size - window
    idx = np.arange(window)[None, :] + np.arange(n)[:, None]
    ctx = corpus[idx]
    X = np.zeros((n, window * vocab))
    X[np.arange(n)[:, None], np.arange(window) * vocab + ctx] = 1.0
    return X, corpus[window:]


def gaussian_clusters(cfg: DataConfig, rng: RandomSource) -> tuple[np.ndarray, np.ndarray]:
    # unit noise per coordinate; centers sit about `spread` apart
    centers = rng.fork("centers").normal((cfg.clusters, cfg.dim)) * (cfg.spread / np.sqrt(cfg.dim))
    labels = rng.fork("labels").integers(0, cfg.clusters, size=cfg.samples)
    X = centers[labels] + rng.fork("noise").normal((cfg.samples, cfg.dim))
    return X, labels.astype(np.int64)


def make_dataset(cfg: DataConfig, seed: int) -> Dataset:
    rng = RandomSource(seed).fork(f"data/{cfg.kind}")
    if cfg.kind == "char_window":
        X, y = char_windows(char_corpus(cfg, rng), cfg.vocab, cfg.window)
        n_out = cfg.vocab
    else:
        X, y = gaussian_clusters(cfg, rng)
        n_out = cfg.clusters
    cut = split_contiguous(len(y))
    return Dataset(X[:cut], y[:cut], X[cut:], y[cut:], X.shape[1], n_out)
