"""Stopping-time engine and flip statistics.

A coordinate's trajectory is cut into excursions by two thresholds: the outer
region ``|w| >= rho`` and the boundary band ``|w| <= epsilon``. Outer entries
(sigma) and boundary hits (tau) alternate; an effective flip is a pair of
consecutive outer entries with opposite signs.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, FormatError
from .numerics import RandomSource

DEFAULT_RHO = 1e-3
DEFAULT_EPSILON0 = 1e-4
DEFAULT_COORD_CAP = 2048

STRC_MAGIC = b"STRC"
STRC_VERSION = 1
_STRC_HEADER = struct.Struct("<4sBII")


@dataclass(frozen=True)
class StoppingConfig:
    rho: float = DEFAULT_RHO
    epsilon0: float = DEFAULT_EPSILON0
    delta_hat: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise ConfigError(f"rho must be positive and finite, got {self.rho}")
        if not 0 < self.epsilon0 < self.rho:
            raise ConfigError(f"need 0 < epsilon0 < rho, got epsilon0={self.epsilon0}, rho={self.rho}")
        if self.delta_hat is not None:
            if not self.delta_hat >= 0:
                raise ConfigError(f"delta_hat must be nonnegative, got {self.delta_hat}")
            if self.delta_hat >= self.rho:
                raise ConfigError(
                    f"delta_hat={self.delta_hat} >= rho={self.rho}: outer region and boundary band overlap")

    @property
    def epsilon(self) -> float:
        if self.delta_hat is None:
            return self.epsilon0
        return max(self.epsilon0, self.delta_hat)


@dataclass(frozen=True)
class CoordinateTrace:
    coord_id: int | str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ConfigError(f"trace {self.coord_id} is empty")
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"trace {self.coord_id} has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ExcursionRecord:
    sigma: list[int]
    tau: list[int]
    signs_at_sigma: list[int]

    @property
    def n_T(self) -> int:
        """Completed outer re-entries (sigma_k with k >= 1)."""
        return max(len(self.sigma) - 1, 0)

    @property
    def k_eff(self) -> int:
        s = self.signs_at_sigma
        return sum(1 for a, b in zip(s, s[1:]) if a != b)


@dataclass(frozen=True)
class ZigFit:
    h_hat: float
    g_hat: float
    n: int

    def tail(self, k: int) -> float:
        return zig_tail(self.h_hat, self.g_hat, k)


@dataclass
class FlipStats:
    k_eff: np.ndarray
    n_T: np.ndarray
    flip_steps: np.ndarray
    flip_curve: np.ndarray
    flip_mean: float
    init_mismatch: float

    def summary(self) -> dict:
        return {
            "coordinates": int(self.k_eff.size),
            "flip_mean": self.flip_mean,
            "init_mismatch": self.init_mismatch,
            "max_flip_t": float(self.flip_curve.max()) if self.flip_curve.size else 0.0,
            "frac_keff_zero": float(np.mean(self.k_eff == 0)) if self.k_eff.size else 1.0,
        }


def _values(trace) -> np.ndarray:
    if isinstance(trace, CoordinateTrace):
        return trace.values
    return CoordinateTrace(-1, trace).values


# ---------------------------------------------------------------------------
# Offline excursions
# ---------------------------------------------------------------------------

def excursions(trace, cfg: StoppingConfig) -> ExcursionRecord:
    w = _values(trace)
    rho, eps = cfg.rho, cfg.epsilon
    sigma: list[int] = []
    tau: list[int] = []
    signs: list[int] = []
    waiting_outer = True
    for t, x in enumerate(w):
        a = abs(x)
        if waiting_outer:
            if a >= rho:
                sigma.append(t)
                signs.append(1 if x >= 0 else -1)
                waiting_outer = False
        elif a <= eps:
            tau.append(t)
            waiting_outer = True
    return ExcursionRecord(sigma, tau, signs)


def k_eff(trace, cfg: StoppingConfig) -> int:
    return excursions(trace, cfg).k_eff


def first_hit_delta_band(trace, delta: float) -> int | None:
    if delta < 0:
        raise ConfigError(f"delta must be nonnegative, got {delta}")
    hits = np.flatnonzero(np.abs(_values(trace)) <= delta)
    return int(hits[0]) if hits.size else None


def max_update(trace) -> float:
    w = _values(trace)
    if w.size < 2:
        raise ConfigError("max_update needs at least two points")
    return float(np.max(np.abs(np.diff(w))))


# ---------------------------------------------------------------------------
# Streaming tracker
# ---------------------------------------------------------------------------

_WAIT_FIRST, _WAIT_BAND, _WAIT_OUTER = 0, 1, 2


class ExcursionTracker:
    """Vectorized excursion state machine over many coordinates.

    Feed one value per coordinate per step with :meth:`update`. Results match
    :func:`excursions` applied to each full trace.
    """

    def __init__(self, n: int, cfg: StoppingConfig):
        if n < 1:
            raise ConfigError("tracker needs at least one coordinate")
        self.cfg = cfg
        self.phase = np.full(n, _WAIT_FIRST, dtype=np.int8)
        self.last_sign = np.zeros(n, dtype=np.int8)
        self.k_eff = np.zeros(n, dtype=np.int64)
        self.n_T = np.zeros(n, dtype=np.int64)
        self.max_update = np.zeros(n, dtype=np.float64)
        self._prev: np.ndarray | None = None
        self.steps = 0

    def update(self, w) -> None:
        w = np.asarray(w, dtype=np.float64)
        a = np.abs(w)
        if self._prev is not None:
            np.maximum(self.max_update, np.abs(w - self._prev), out=self.max_update)
        self._prev = w.copy()
        rho, eps = self.cfg.rho, self.cfg.epsilon
        sign = np.where(w >= 0, 1, -1).astype(np.int8)
        outer = a >= rho

        first = (self.phase == _WAIT_FIRST) & outer
        band = (self.phase == _WAIT_BAND) & (a <= eps)
        back = (self.phase == _WAIT_OUTER) & outer

        self.k_eff += back & (sign != self.last_sign)
        self.n_T += back
        entered = first | back
        self.last_sign[entered] = sign[entered]
        self.phase[entered] = _WAIT_BAND
        self.phase[band] = _WAIT_OUTER
        self.steps += 1


def track_traces(traces: np.ndarray, cfg: StoppingConfig) -> ExcursionTracker:
    """Run the tracker over a (coords, steps) array."""
    traces = np.asarray(traces, dtype=np.float64)
    if traces.ndim != 2:
        raise ConfigError(f"expected (coords, steps) array, got shape {traces.shape}")
    tr = ExcursionTracker(traces.shape[0], cfg)
    for t in range(traces.shape[1]):
        tr.update(traces[:, t])
    return tr


def sample_coordinates(size: int, cap: int | None, rng: RandomSource) -> np.ndarray:
    """Flat indices of the coordinates to track in a tensor of ``size`` entries."""
    if cap is None or size <= cap:
        return np.arange(size)
    if cap < 1:
        raise ConfigError(f"coordinate cap must be positive, got {cap}")
    return np.sort(rng.choice(size, cap, replace=False))


# ---------------------------------------------------------------------------
# Flip rates
# ---------------------------------------------------------------------------

def flip_mean(snapshots: Sequence[np.ndarray]) -> float:
    """Average per-step fraction of sign changes between consecutive snapshots."""
    if len(snapshots) < 2:
        raise ConfigError("flip_mean needs at least two snapshots")
    shape = np.shape(snapshots[0])
    rates = []
    for prev, cur in zip(snapshots, snapshots[1:]):
        prev, cur = np.asarray(prev), np.asarray(cur)
        if prev.shape != shape or cur.shape != shape:
            raise ConfigError("snapshot shape mismatch")
        rates.append(np.count_nonzero(prev != cur) / prev.size)
    return float(math.fsum(rates) / len(rates))


# ---------------------------------------------------------------------------
# Zero-inflated geometric law
# ---------------------------------------------------------------------------

def _counts(counts) -> np.ndarray:
    c = np.asarray(counts).ravel()
    if c.size == 0:
        raise ConfigError("need at least one count")
    if np.any(c < 0) or np.any(c != np.floor(c)):
        raise ConfigError("counts must be nonnegative integers")
    return c.astype(np.int64)


def fit_zig(counts) -> ZigFit:
    c = _counts(counts)
    pos = c[c > 0]
    h = pos.size / c.size
    g = 0.0
    if pos.size:
        mean = pos.mean()
        if mean > 1.0:
            g = 1.0 - 1.0 / mean
    return ZigFit(float(h), float(g), int(c.size))


def fit_zig_by_group(counts, groups) -> dict[str, ZigFit]:
    """Separate fits per group label (e.g. per layer)."""
    c = _counts(counts)
    labels = np.asarray(groups)
    if labels.shape != c.shape:
        raise ConfigError("counts and groups differ in length")
    return {str(key): fit_zig(c[labels == key]) for key in np.unique(labels)}


def zig_tail(h: float, g: float, k: int) -> float:
    if not 0.0 <= h <= 1.0:
        raise ConfigError(f"h outside [0, 1]: {h}")
    if not 0.0 <= g < 1.0:
        raise ConfigError(f"g outside [0, 1): {g}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return h * g ** (k - 1)


def tail_empirical(counts, k: int) -> float:
    c = _counts(counts)
    return float(np.count_nonzero(c >= k) / c.size)


def sample_zig(h: float, g: float, n: int, rng: RandomSource) -> np.ndarray:
    """n draws with P[K=0] = 1-h and P[K=k] = h(1-g)g^(k-1)."""
    zig_tail(h, g, 1)
    positive = rng.uniform(n) < h
    k = np.ones(n, dtype=np.int64)
    if g > 0:
        u = 1.0 - rng.uniform(n)  # (0, 1]
        k += np.floor(np.log(u) / math.log(g)).astype(np.int64)
    return np.where(positive, k, 0)


@dataclass(frozen=True)
class TailFit:
    ks: np.ndarray
    tail: np.ndarray
    slope: float
    intercept: float
    r2: float

    @property
    def ratio(self) -> float:
        return math.exp(self.slope)


def geometric_tail_fit(counts, min_support: int = 10) -> TailFit:
    """Least-squares line through log P[K >= k] for k >= 1.

    Only k with at least ``min_support`` counts >= k are used. With fewer
    than two usable points the slope and R^2 are NaN.
    """
    c = _counts(counts)
    ks, tails = [], []
    k = 1
    while np.count_nonzero(c >= k) >= min_support:
        ks.append(k)
        tails.append(np.count_nonzero(c >= k) / c.size)
        k += 1
    ks_a = np.array(ks, dtype=np.float64)
    tails_a = np.array(tails, dtype=np.float64)
    if ks_a.size < 2:
        return TailFit(ks_a, tails_a, math.nan, math.nan, math.nan)
    y = np.log(tails_a)
    slope, intercept = np.polyfit(ks_a, y, 1)
    resid = y - (slope * ks_a + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return TailFit(ks_a, tails_a, float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# Floating mode
# ---------------------------------------------------------------------------

def floating_binomial_pmf(n: int, k: int) -> float:
    if n < 0 or k < 0 or k > n:
        raise ConfigError(f"need 0 <= k <= n, got n={n}, k={k}")
    return math.comb(n, k) / 2.0**n


@dataclass(frozen=True)
class GofResult:
    statistic: float
    dof: int
    p_value: float
    groups: int


def _pool_bins(observed: list[float], expected: list[float], min_expected: float):
    pooled_o, pooled_e = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            pooled_o.append(acc_o)
            pooled_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if pooled_e:
            pooled_o[-1] += acc_o
            pooled_e[-1] += acc_e
        else:
            pooled_o.append(acc_o)
            pooled_e.append(acc_e)
    return pooled_o, pooled_e


def floating_gof(keff_counts, n_counts, min_expected: float = 5.0) -> GofResult:
    """Chi-square test of K_eff | N_T = n against Binomial(n, 1/2).

    Within each n-group, adjacent k bins are merged until every bin expects
    at least ``min_expected`` observations.
    """
    keff = _counts(keff_counts)
    ns = _counts(n_counts)
    if keff.shape != ns.shape:
        raise ConfigError("k_eff and n_T arrays differ in length")
    if np.any(keff > ns):
        raise ConfigError("k_eff exceeds n_T for some coordinate")
    by_n: dict[int, Counter] = defaultdict(Counter)
    for k, n in zip(keff.tolist(), ns.tolist()):
        by_n[n][k] += 1
    stat = 0.0
    dof = 0
    groups = 0
    for n in sorted(by_n):
        hist = by_n[n]
        total = sum(hist.values())
        observed = [float(hist.get(k, 0)) for k in range(n + 1)]
        expected = [total * floating_binomial_pmf(n, k) for k in range(n + 1)]
        o, e = _pool_bins(observed, expected, min_expected)
        if len(o) < 2:
            continue
        groups += 1
        dof += len(o) - 1
        stat += sum((oi - ei) ** 2 / ei for oi, ei in zip(o, e))
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else math.nan
    return GofResult(float(stat), dof, p, groups)


# ---------------------------------------------------------------------------
# Synthetic trace generators
# ---------------------------------------------------------------------------

def _excursion_path(signs: Sequence[int], rho: float, eps: float, dwell: int) -> list[float]:
    path: list[float] = []
    for i, s in enumerate(signs):
        if i:
            path.extend([0.5 * eps * s] * dwell)
        path.extend([2.0 * rho * s] * dwell)
    return path


def zig_traces(h: float, g: float, n: int, cfg: StoppingConfig, rng: RandomSource,
               dwell: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Traces whose effective flip counts are ZIG(h, g) draws.

    Returns (traces, true_counts); shorter paths are padded with their
    final value.
    """
    counts = sample_zig(h, g, n, rng)
    paths = []
    for k in counts.tolist():
        signs = [1 if i % 2 == 0 else -1 for i in range(k + 1)]
        paths.append(_excursion_path(signs, cfg.rho, cfg.epsilon, dwell))
    width = max(len(p) for p in paths)
    out = np.empty((n, width))
    for i, p in enumerate(paths):
        out[i, : len(p)] = p
        out[i, len(p):] = p[-1]
    return out, counts


def mixing_traces(n: int, max_excursions: int, cfg: StoppingConfig, rng: RandomSource,
                  dwell: int = 2) -> np.ndarray:
    """Traces whose sign at every outer entry is an independent fair coin."""
    lengths = rng.integers(1, max_excursions + 2, size=n)
    paths = []
    for m in lengths.tolist():
        signs = rng.rademacher(m).tolist()
        paths.append(_excursion_path(signs, cfg.rho, cfg.epsilon, dwell))
    width = max(len(p) for p in paths)
    out = np.empty((n, width))
    for i, p in enumerate(paths):
        out[i, : len(p)] = p
        out[i, len(p):] = p[-1]
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_traces(traces: np.ndarray, path) -> None:
    """Write a (coords, steps) array as an STRC file."""
    a = np.ascontiguousarray(traces, dtype="<f4")
    if a.ndim != 2:
        raise ConfigError(f"expected (coords, steps) array, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_STRC_HEADER.pack(STRC_MAGIC, STRC_VERSION, a.shape[0], a.shape[1]))
        fh.write(a.tobytes(order="C"))


def load_traces(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != STRC_MAGIC:
        raise FormatError(f"{path}: bad magic (not an STRC file)")
    if len(raw) < _STRC_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, coords, steps = _STRC_HEADER.unpack_from(raw)
    if version != STRC_VERSION:
        raise FormatError(f"{path}: unsupported STRC version {version}")
    need = coords * steps * 4
    payload = raw[_STRC_HEADER.size:]
    if len(payload) != need:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {need}")
    data = np.frombuffer(payload, dtype="<f4").reshape(coords, steps).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite trace values")
    return data


def write_keff_csv(path, k_eff: Iterable[int], coord_ids: Iterable | None = None) -> None:
    k_eff = list(k_eff)
    ids = list(coord_ids) if coord_ids is not None else list(range(len(k_eff)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coord_id", "k_eff"])
        w.writerows(zip(ids, (int(k) for k in k_eff)))


def write_tail_csv(path, counts, fit: ZigFit) -> None:
    c = _counts(counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "tail_empirical", "zig_tail"])
        for k in range(1, int(c.max()) + 2):
            w.writerow([k, tail_empirical(c, k), fit.tail(k)])


def zigfit_json(fit: ZigFit) -> str:
    return json.dumps(asdict(fit), indent=2)
