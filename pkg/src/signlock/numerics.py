"""Shared numeric kernels: truncated SVD, KS distance, binary entropy,
Gaussian CDF, and a seeded random source."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

# Matrices with min(m, n) above this use randomized subspace iteration.
EXACT_SVD_MAX_DIM = 512
_SUBSPACE_ITERS = 4
_OVERSAMPLE = 8


# ---------------------------------------------------------------------------
# Random source
# ---------------------------------------------------------------------------

def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x &= 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def derive_seed(seed: int, key) -> int:
    """Child seed from a parent seed and an int or string key."""
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        k = int.from_bytes(digest[:8], "little")
    else:
        k = int(key) & 0xFFFFFFFFFFFFFFFF
    return _mix64(_mix64(int(seed)) ^ _mix64(k + 0x9E3779B97F4A7C15))


class RandomSource:
    """Deterministic random stream built on the Philox4x64 counter generator.

    Normal variates come from Box-Muller on the uniform stream, so the output
    depends only on the seed and numpy's Philox constants. Not thread safe;
    use :meth:`fork` to hand independent streams to workers.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def fork(self, key) -> "RandomSource":
        return RandomSource(derive_seed(self.seed, key))

    def uniform(self, size=None, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ConfigError(f"uniform needs lo < hi, got [{lo}, {hi})")
        u = self._gen.random(size)
        return lo + (hi - lo) * u

    def normal(self, size=None, sigma: float = 1.0) -> np.ndarray:
        n = 1 if size is None else int(np.prod(size))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        z = sigma * z
        if size is None:
            return z[0]
        return z.reshape(size)

    def rademacher(self, size) -> np.ndarray:
        bits = self._gen.integers(0, 2, size=size, dtype=np.int8)
        return (2 * bits - 1).astype(np.int8)

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def rademacher_matrix(m: int, n: int, rng: RandomSource) -> np.ndarray:
    _check_dims(m, n)
    return rng.rademacher((m, n))


def gaussian_matrix(m: int, n: int, sigma: float, rng: RandomSource) -> np.ndarray:
    _check_dims(m, n)
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return rng.normal((m, n), sigma=sigma)


def uniform_matrix(m: int, n: int, lo: float, hi: float, rng: RandomSource) -> np.ndarray:
    _check_dims(m, n)
    return rng.uniform((m, n), lo, hi)


def _check_dims(m: int, n: int) -> None:
    if m < 1 or n < 1:
        raise ConfigError(f"matrix dimensions must be positive, got {m}x{n}")


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray  # m x r
    S: np.ndarray  # r, nonincreasing
    V: np.ndarray  # n x r

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _as_finite_2d(M) -> np.ndarray:
    a = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError("matrix contains non-finite entries")
    return a


def _exact_svd(a: np.ndarray, r: int) -> SvdFactors:
    U, S, Vt = np.linalg.svd(a, full_matrices=False)
    return SvdFactors(U[:, :r], S[:r], Vt[:r].T)


def _randomized_svd(a: np.ndarray, r: int, seed: int = 0) -> SvdFactors:
    m, n = a.shape
    k = min(r + _OVERSAMPLE, min(m, n))
    rng = RandomSource(seed)
    omega = rng.normal((n, k))
    Q, _ = np.linalg.qr(a @ omega)
    for _ in range(_SUBSPACE_ITERS):
        Z, _ = np.linalg.qr(a.T @ Q)
        Q, _ = np.linalg.qr(a @ Z)
    B = Q.T @ a
    Ub, S, Vt = np.linalg.svd(B, full_matrices=False)
    return SvdFactors((Q @ Ub)[:, :r], S[:r], Vt[:r].T)


def truncated_svd(M, r: int) -> SvdFactors:
    """Rank-``r`` truncated SVD.

    LAPACK is used when ``min(m, n) <= EXACT_SVD_MAX_DIM`` or when ``r`` is
    a large share of the spectrum; otherwise a seeded randomized subspace
    iteration (4 power iterations, oversampling 8) gives the leading factors.
    """
    a = _as_finite_2d(M)
    d = min(a.shape)
    if not 1 <= r <= d:
        raise ConfigError(f"rank {r} outside [1, {d}]")
    if d <= EXACT_SVD_MAX_DIM or r + _OVERSAMPLE >= d // 2:
        return _exact_svd(a, r)
    return _randomized_svd(a, r)


def singular_values(M) -> np.ndarray:
    a = _as_finite_2d(M)
    return np.linalg.svd(a, compute_uv=False)


def rank_error_from_spectrum(sv: np.ndarray, r: int) -> float:
    """E_r from a full singular spectrum (nonincreasing)."""
    energy = sv.astype(np.float64) ** 2
    total = energy.sum()
    if total <= 0:
        raise NumericError("rank error undefined for a zero matrix")
    tail = energy[r:].sum()
    return float(math.sqrt(max(tail, 0.0) / total))


def rank_error(M, r: int) -> float:
    """Relative Frobenius error of the best rank-``r`` approximation."""
    a = _as_finite_2d(M)
    d = min(a.shape)
    if not 1 <= r <= d:
        raise ConfigError(f"rank {r} outside [1, {d}]")
    total = float(np.sum(a * a))
    if total <= 0:
        raise NumericError("rank error undefined for a zero matrix")
    if r == d:
        return 0.0
    if d <= EXACT_SVD_MAX_DIM:
        return rank_error_from_spectrum(singular_values(a), r)
    head = float(np.sum(truncated_svd(a, r).S ** 2))
    return float(math.sqrt(max(total - head, 0.0) / total))


# ---------------------------------------------------------------------------
# Distribution helpers
# ---------------------------------------------------------------------------

def ks_two_sample(xs, ys) -> float:
    """Two-sample Kolmogorov-Smirnov distance sup |F_x - F_y|.

    Both samples are sorted and swept in merged order; every copy of a tied
    value is consumed before the gap is measured.
    """
    x = np.sort(np.asarray(xs, dtype=np.float64).ravel())
    y = np.sort(np.asarray(ys, dtype=np.float64).ravel())
    if x.size == 0 or y.size == 0:
        raise ConfigError("KS statistic needs two nonempty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / x.size
    fy = np.searchsorted(y, grid, side="right") / y.size
    return float(np.max(np.abs(fx - fy)))


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def binary_entropy_inv(y: float, tol: float = 1e-12) -> float:
    """Inverse of h2 restricted to [0, 1/2], by bisection."""
    if not 0.0 <= y <= 1.0:
        raise ConfigError(f"entropy value out of range: {y}")
    if y == 0.0:
        return 0.0
    if y == 1.0:
        return 0.5
    lo, hi = 0.0, 0.5
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binary_entropy(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_cdf(x: float, sigma: float = 1.0) -> float:
    """Phi(x / sigma) via the C library's erfc (relative error near 1e-16)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return 0.5 * math.erfc(-x / (sigma * math.sqrt(2.0)))
