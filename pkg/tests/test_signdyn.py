from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signlock.errors import ConfigError, FormatError
from signlock.numerics import RandomSource
from signlock.signdyn import (
    ExcursionTracker,
    StoppingConfig,
    excursions,
    fit_zig,
    first_hit_delta_band,
    flip_mean,
    floating_binomial_pmf,
    floating_gof,
    geometric_tail_fit,
    k_eff,
    load_traces,
    max_update,
    mixing_traces,
    sample_zig,
    save_traces,
    tail_empirical,
    track_traces,
    zig_tail,
    zig_traces,
)

CFG = StoppingConfig(rho=0.1, epsilon0=0.01)


def brute_force(w, rho, eps):
    """Stopping times scanned straight from their definition."""
    w = np.asarray(w, dtype=np.float64)
    T = len(w)

    def first(pred, after):
        for t in range(after + 1, T):
            if pred(w[t]):
                return t
        return None

    sigma, tau = [], []
    s = first(lambda x: abs(x) >= rho, -1)
    while s is not None:
        sigma.append(s)
        t = first(lambda x: abs(x) <= eps, s)
        if t is None:
            break
        tau.append(t)
        s = first(lambda x: abs(x) >= rho, t)
    signs = [1 if w[s] >= 0 else -1 for s in sigma]
    keff = sum(signs[i] != signs[i - 1] for i in range(1, len(signs)))
    return sigma, tau, keff


def test_excursion_examples():
    rec = excursions([0.5, 0.2, 0.005, -0.2, -0.5], CFG)
    assert rec.sigma == [0, 3] and rec.tau == [2] and rec.signs_at_sigma == [1, -1]
    rec = excursions([0.5] * 6, CFG)
    assert rec.sigma == [0] and rec.tau == [] and rec.n_T == 0
    rec = excursions([0.05, -0.02, 0.0], CFG)
    assert rec.sigma == [] and rec.tau == []


def test_keff_examples():
    assert k_eff([0.5, 0.2, 0.005, -0.2, -0.5], CFG) == 1
    assert k_eff([0.5, 0.005, -0.5, 0.004, 0.5], CFG) == 2
    assert k_eff([0.3, 0.2, 0.4], CFG) == 0


def test_epsilon_uses_delta_hat():
    cfg = StoppingConfig(0.1, 0.01, delta_hat=0.05)
    assert cfg.epsilon == 0.05
    with pytest.raises(ConfigError):
        StoppingConfig(0.1, 0.01, delta_hat=0.1)
    with pytest.raises(ConfigError):
        StoppingConfig(0.1, 0.2)


def test_first_hit_and_max_update():
    assert first_hit_delta_band([0.5, 0.03, 0.5], 0.05) == 1
    assert first_hit_delta_band([0.5, 0.3], 0.05) is None
    assert first_hit_delta_band([0.5, 0.0, 0.0], 0.0) == 1
    assert max_update([0, 1, 0]) == 1
    assert max_update([0.2, 0.2, 0.2]) == 0
    assert max_update([0, 0.3, -0.2]) == 0.5


def test_flip_mean_examples():
    S = np.array([[1, -1], [1, 1]])
    assert flip_mean([S, S, S]) == 0
    assert flip_mean([S, -S, S, -S]) == 1
    S1 = S.copy()
    S1[0, 0] = -1
    assert flip_mean([S, S1, S1]) == 0.125


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3, allow_nan=False), min_size=1, max_size=60))
def test_tracker_matches_brute_force_property(w):
    sigma, tau, keff = brute_force(w, CFG.rho, CFG.epsilon)
    rec = excursions(w, CFG)
    assert rec.sigma == sigma and rec.tau == tau and rec.k_eff == keff
    tr = track_traces(np.array([w]), CFG)
    assert tr.k_eff[0] == keff
    assert tr.n_T[0] == max(len(sigma) - 1, 0)


def test_tracker_vectorized_equals_scalar():
    rng = np.random.default_rng(5)
    X = np.cumsum(rng.normal(scale=0.05, size=(50, 200)), axis=1)
    tr = track_traces(X, CFG)
    for i in range(X.shape[0]):
        rec = excursions(X[i], CFG)
        assert tr.k_eff[i] == rec.k_eff
        assert tr.n_T[i] == rec.n_T
        assert tr.max_update[i] == pytest.approx(max_update(X[i]))


def test_tracker_rejects_empty():
    with pytest.raises(ConfigError):
        ExcursionTracker(0, CFG)


def test_fit_zig_examples():
    f = fit_zig([0, 0, 0, 0])
    assert (f.h_hat, f.g_hat) == (0, 0)
    f = fit_zig([0, 0, 1, 1])
    assert (f.h_hat, f.g_hat) == (0.5, 0)
    f = fit_zig([0, 1, 3])
    assert f.h_hat == pytest.approx(2 / 3) and f.g_hat == pytest.approx(0.5)


def test_fit_zig_matches_numeric_mle():
    from scipy.optimize import minimize

    counts = np.array([0] * 40 + [1] * 20 + [2] * 10 + [3] * 6 + [5] * 2)

    def nll(x):
        h, g = x
        ll = np.where(counts == 0, np.log(1 - h), np.log(h) + np.log(1 - g) + (counts - 1) * np.log(g))
        return -ll.sum()

    res = minimize(nll, [0.5, 0.5], bounds=[(1e-6, 1 - 1e-6)] * 2)
    f = fit_zig(counts)
    assert f.h_hat == pytest.approx(res.x[0], abs=1e-4)
    assert f.g_hat == pytest.approx(res.x[1], abs=1e-4)


def test_tail_examples():
    assert zig_tail(0.4, 0.5, 3) == pytest.approx(0.1)
    assert zig_tail(0.4, 0.5, 1) == 0.4
    assert tail_empirical([0, 1, 2, 2], 2) == 0.5


def test_binomial_pmf():
    assert floating_binomial_pmf(0, 0) == 1
    assert floating_binomial_pmf(2, 1) == 0.5
    assert floating_binomial_pmf(4, 2) == 0.375


def test_zig_sampler_and_traces():
    rng = RandomSource(11)
    k = sample_zig(0.3, 0.6, 20000, rng)
    f = fit_zig(k)
    assert abs(f.h_hat - 0.3) < 0.02 and abs(f.g_hat - 0.6) < 0.02
    cfg = StoppingConfig(1e-3, 1e-4)
    traces, counts = zig_traces(0.3, 0.6, 300, cfg, RandomSource(2))
    assert np.array_equal(track_traces(traces, cfg).k_eff, counts)


def test_geometric_tail_fit_exact_geometric():
    # P[K >= k] = 0.5^k exactly
    counts = np.concatenate([np.full(2 ** (12 - k), k) for k in range(0, 12)])
    counts = np.concatenate([np.zeros(1, dtype=int), counts])
    fit = geometric_tail_fit(counts)
    assert fit.r2 > 0.999
    assert fit.ratio == pytest.approx(0.5, rel=0.05)
    few = geometric_tail_fit([0, 1])
    assert math.isnan(few.slope)


def test_floating_gof_accepts_binomial_and_rejects_locked():
    cfg = StoppingConfig(1e-3, 1e-4)
    tr = track_traces(mixing_traces(3000, 6, cfg, RandomSource(8)), cfg)
    keff, n = tr.k_eff, tr.n_T
    assert floating_gof(keff, n).p_value > 0.01
    locked = np.zeros_like(n)
    assert floating_gof(locked, n).p_value < 1e-6


def test_strc_roundtrip(tmp_path):
    X = np.random.default_rng(0).normal(size=(4, 9)).astype(np.float32)
    save_traces(X, tmp_path / "t.strc")
    assert np.array_equal(load_traces(tmp_path / "t.strc"), X)
    (tmp_path / "bad.strc").write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        load_traces(tmp_path / "bad.strc")
