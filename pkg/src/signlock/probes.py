"""Sign-structure diagnostics: low-rank compressibility curves, a spectral
randomness test against Rademacher matrices, and a patch entropy-rate proxy."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .matio import WeightMatrix, sign_decompose
from .numerics import (
    RandomSource,
    binary_entropy_inv,
    ks_two_sample,
    rank_error_from_spectrum,
    singular_values,
)

DEFAULT_Q_GRID = tuple(k / 2048 for k in (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048))
SVD_LAYER_CAP = 40
ENTROPY_LAYER_CAP = 6
KS_SUBMATRIX = 256
KS_MIN_SUBMATRIX = 32
KS_N_SUB = 20
DEFAULT_PATCHES = 100_000


def _select(layers: Sequence[WeightMatrix], cap: int | None) -> list[WeightMatrix]:
    """Largest layers first by min(m, n); stable for ties."""
    ordered = sorted(layers, key=lambda L: -min(L.shape))
    return ordered if cap is None else ordered[:cap]


def rank_for_ratio(q: float, d: int) -> int:
    if not 0 < q <= 1:
        raise ConfigError(f"rank ratio must lie in (0, 1], got {q}")
    return min(max(int(math.floor(q * d + 0.5)), 1), d)


# ---------------------------------------------------------------------------
# SVD compressibility
# ---------------------------------------------------------------------------

@dataclass
class SvdLayerCurve:
    layer: str
    d: int
    q: np.ndarray
    ranks: np.ndarray
    e_sign: np.ndarray
    e_mag: np.ndarray


@dataclass
class SvdProbeReport:
    layers: list[SvdLayerCurve]
    q: np.ndarray
    mean_sign: np.ndarray
    mean_mag: np.ndarray
    excluded: list[str] = field(default_factory=list)

    def rows(self):
        for c in self.layers:
            for q, es, em in zip(c.q, c.e_sign, c.e_mag):
                yield (c.layer, "E_sign", q, es)
                yield (c.layer, "E_mag", q, em)
        for q, es, em in zip(self.q, self.mean_sign, self.mean_mag):
            yield ("__mean__", "E_sign", q, es)
            yield ("__mean__", "E_mag", q, em)

    def summary(self) -> dict:
        return {
            "layers": [c.layer for c in self.layers],
            "excluded": self.excluded,
            "q": self.q.tolist(),
            "mean_E_sign": self.mean_sign.tolist(),
            "mean_E_mag": self.mean_mag.tolist(),
        }


def svd_curve(W: WeightMatrix, q_grid=DEFAULT_Q_GRID) -> SvdLayerCurve:
    d = min(W.shape)
    if d < 2:
        raise ConfigError(f"{W.name}: needs min(m, n) >= 2")
    S, A = sign_decompose(W)
    sv_s = singular_values(S)
    sv_a = singular_values(A)
    q = np.asarray(q_grid, dtype=np.float64)
    ranks = np.array([rank_for_ratio(x, d) for x in q])
    e_s = np.array([rank_error_from_spectrum(sv_s, r) for r in ranks])
    e_a = np.array([rank_error_from_spectrum(sv_a, r) for r in ranks])
    return SvdLayerCurve(W.name, d, q, ranks, e_s, e_a)


def svd_probe(layers: Sequence[WeightMatrix], q_grid=DEFAULT_Q_GRID,
              max_layers: int | None = SVD_LAYER_CAP) -> SvdProbeReport:
    curves, excluded = [], []
    for W in _select(layers, max_layers):
        if min(W.shape) < 2:
            excluded.append(W.name)
            continue
        if not np.any(W.data):
            warnings.warn(f"{W.name}: zero matrix excluded from SVD probe", stacklevel=2)
            excluded.append(W.name)
            continue
        curves.append(svd_curve(W, q_grid))
    if not curves:
        raise ConfigError("no layer eligible for the SVD probe")
    q = np.asarray(q_grid, dtype=np.float64)
    return SvdProbeReport(
        curves, q,
        np.mean([c.e_sign for c in curves], axis=0),
        np.mean([c.e_mag for c in curves], axis=0),
        excluded,
    )


# ---------------------------------------------------------------------------
# Spectral randomness
# ---------------------------------------------------------------------------

@dataclass
class KsLayerResult:
    layer: str
    s: int
    n_sub: int
    D: float | None
    skipped: str | None = None


@dataclass
class KsProbeReport:
    layers: list[KsLayerResult]
    pooled_D: float | None

    def summary(self) -> dict:
        return {
            "pooled_D": self.pooled_D,
            "layers": [vars(r) for r in self.layers],
        }


def _submatrix_spectra(S: np.ndarray, s: int, n_sub: int, rng: RandomSource) -> np.ndarray:
    m, n = S.shape
    rows = rng.integers(0, m - s + 1, size=n_sub)
    cols = rng.integers(0, n - s + 1, size=n_sub)
    out = [singular_values(S[i:i + s, j:j + s]) / math.sqrt(s) for i, j in zip(rows, cols)]
    return np.concatenate(out)


def _rademacher_spectra(s: int, n_sub: int, rng: RandomSource) -> np.ndarray:
    return np.concatenate([
        singular_values(rng.rademacher((s, s)).astype(np.float64)) / math.sqrt(s)
        for _ in range(n_sub)
    ])


def _ks_samples(S, name: str, rng: RandomSource, s_max: int, n_sub: int, min_s: int):
    S = np.asarray(S, dtype=np.float64)
    s = min(s_max, min(S.shape))
    if s < min_s:
        return KsLayerResult(name, s, 0, None, f"s={s} < {min_s}"), None, None
    trained = _submatrix_spectra(S, s, n_sub, rng.fork("sub"))
    base = _rademacher_spectra(s, n_sub, rng.fork("baseline"))
    return KsLayerResult(name, s, n_sub, ks_two_sample(trained, base)), trained, base


def spectral_randomness_probe(S, rng: RandomSource, name: str = "S", s_max: int = KS_SUBMATRIX,
                              n_sub: int = KS_N_SUB, min_s: int = KS_MIN_SUBMATRIX) -> KsProbeReport:
    """KS distance between normalized submatrix spectra of S and of Rademacher draws."""
    res, _, _ = _ks_samples(S, name, rng, s_max, n_sub, min_s)
    return KsProbeReport([res], res.D)


def ks_probe(layers: Sequence[WeightMatrix], rng: RandomSource, s_max: int = KS_SUBMATRIX,
             n_sub: int = KS_N_SUB, min_s: int = KS_MIN_SUBMATRIX,
             max_layers: int | None = ENTROPY_LAYER_CAP) -> KsProbeReport:
    results, pooled_t, pooled_b = [], [], []
    for W in _select(layers, max_layers):
        S, _ = sign_decompose(W)
        res, t, b = _ks_samples(S, W.name, rng.fork(W.name), s_max, n_sub, min_s)
        results.append(res)
        if t is not None:
            pooled_t.append(t)
            pooled_b.append(b)
    pooled = None
    if pooled_t:
        pooled = ks_two_sample(np.concatenate(pooled_t), np.concatenate(pooled_b))
    return KsProbeReport(results, pooled)


# ---------------------------------------------------------------------------
# Patch entropy
# ---------------------------------------------------------------------------

_PATCH_WEIGHTS = (1 << np.arange(9)).reshape(3, 3)


def patch_entropy(S, n_patches: int = DEFAULT_PATCHES, rng: RandomSource | None = None) -> float:
    """Plug-in entropy (bits) of sampled 3x3 sign patterns, divided by 9."""
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] < 3 or S.shape[1] < 3:
        raise ConfigError(f"patch entropy needs at least a 3x3 matrix, got {S.shape}")
    if n_patches < 1:
        raise ConfigError("n_patches must be positive")
    rng = rng or RandomSource(0)
    bits = (S > 0).astype(np.int64)
    i = rng.integers(0, S.shape[0] - 2, size=n_patches)
    j = rng.integers(0, S.shape[1] - 2, size=n_patches)
    idx = np.zeros(n_patches, dtype=np.int64)
    for di in range(3):
        for dj in range(3):
            idx += bits[i + di, j + dj] * int(_PATCH_WEIGHTS[di, dj])
    counts = np.bincount(idx, minlength=512)
    p = counts[counts > 0] / n_patches
    h = float(-np.sum(p * np.log2(p)))
    return max(0.0, h) / 9.0


@dataclass
class EntropyReport:
    layers: dict[str, float]
    sizes: dict[str, int]
    aggregate: float

    def summary(self) -> dict:
        return {"H_RD": self.aggregate, "layers": self.layers, "sizes": self.sizes}


def entropy_probe(layers: Sequence[WeightMatrix], rng: RandomSource, n_patches: int = DEFAULT_PATCHES,
                  max_layers: int | None = ENTROPY_LAYER_CAP) -> EntropyReport:
    vals, sizes = {}, {}
    for W in _select(layers, max_layers):
        if W.rows < 3 or W.cols < 3:
            continue
        S, _ = sign_decompose(W)
        vals[W.name] = patch_entropy(S, n_patches, rng.fork(W.name))
        sizes[W.name] = W.size
    if not vals:
        raise ConfigError("no layer is at least 3x3")
    agg = aggregate_weighted(list(vals.values()), list(sizes.values()))
    return EntropyReport(vals, sizes, agg)


def rd_lower_bound(H: float, R: float) -> float:
    """Hamming-distortion floor h2^-1(max(0, H - R))."""
    if not 0.0 <= H <= 1.0:
        raise ConfigError(f"entropy rate outside [0, 1]: {H}")
    if R < 0:
        raise ConfigError(f"rate must be nonnegative, got {R}")
    return binary_entropy_inv(max(0.0, H - R))


def aggregate_weighted(values: Sequence[float], sizes: Sequence[int]) -> float:
    if len(values) != len(sizes):
        raise ConfigError("values and sizes differ in length")
    if not values:
        raise ConfigError("nothing to aggregate")
    if any(n <= 0 for n in sizes):
        raise ConfigError("layer sizes must be positive")
    total = sum(sizes)
    return math.fsum(v * n for v, n in zip(values, sizes)) / total


def write_long_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "metric", "x", "y"])
        w.writerows(rows)
