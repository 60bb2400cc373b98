"""Acceptance suite: one test per criterion, each at its stated tolerance.

Training-based criteria share session-cached runs (see conftest). The
conftest prints one PASS/FAIL line per criterion at the end of the session.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from signlock.bounds import SgdBoundParams, g_sgd_from_sums, schedule_order_check
from signlock.compress import (
    bpw_csr,
    bpw_svd,
    codebook,
    quantize,
    quantize_codes,
    rank_for_target,
    scale_for,
)
from signlock.experiments import evaluate_compressed, hidden_layers
from signlock.interventions import barrier_penalty, floating_penalty
from signlock.matio import WeightMatrix, sign_decompose
from signlock.numerics import RandomSource, rank_error, rademacher_matrix
from signlock.probes import ks_probe, patch_entropy, rd_lower_bound, svd_curve
from signlock.signdyn import (
    ExcursionTracker,
    StoppingConfig,
    excursions,
    fit_zig,
    floating_gof,
    geometric_tail_fit,
    mixing_traces,
    sample_zig,
    track_traces,
)
from signlock.trainer import Schedule, forward_backward, init_params, loss
from signlock.trainer.schedules import cosine_sums_closed_form, schedule_sums

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
TEMPLATE_LOCKED = {
    "interventions.template": True,
    "interventions.hard_project": True,
    "interventions.a_init": 0.02,
    "interventions.targets": ["fc1", "fc2"],
}
CLUSTERS = {"data.kind": "gaussian_clusters"}
ORDER_PARAMS = SgdBoundParams(
    delta=0.3, delta_conf=0.05, delta_upd=0.0, l_smooth=1.0, xi=0.01, loss_range=1e-3,
    rho=1.0, epsilon=0.1,
    schedule=Schedule("constant", eta_max=1e-4, T=4000, T_wu=0, gamma=0.9999, p=0.5),
)


def _note(record_property, **kw):
    for k, v in kw.items():
        record_property(k, f"{v:.4g}" if isinstance(v, float) else v)


# ---------------------------------------------------------------------------
# 1. stopping-time oracle
# ---------------------------------------------------------------------------

def _brute_force(w, rho, eps):
    """sigma/tau straight from the definition: each is the first later index
    meeting its condition."""
    sigma, tau = [], []
    n = len(w)
    t = 0
    while True:
        while t < n and abs(w[t]) < rho:
            t += 1
        if t == n:
            break
        sigma.append(t)
        t += 1
        while t < n and abs(w[t]) > eps:
            t += 1
        if t == n:
            break
        tau.append(t)
        t += 1
    signs = [1 if w[s] >= 0 else -1 for s in sigma]
    return sigma, tau, sum(a != b for a, b in zip(signs, signs[1:]))


def _random_traces(n, rng):
    """Random walks with mixed drift, noise scale and start, plus some
    oscillating paths, scaled around the default thresholds."""
    out = []
    for i in range(n):
        T = int(rng.integers(1, 1001))
        kind = i % 4
        scale = 10 ** rng.uniform(-4.5, -2.5)
        if kind == 3:
            t = np.arange(T)
            w = 2e-3 * np.sin(t / rng.uniform(2, 50)) + rng.normal(0, scale, T)
        else:
            drift = (kind - 1) * rng.uniform(0, 2e-5)
            w = rng.normal(0, 2e-3) + np.cumsum(drift + rng.normal(0, scale, T))
        out.append(w)
    return out


def test_criterion_01_stopping_time_oracle(record_property):
    cfg = StoppingConfig()
    rng = np.random.default_rng(2024)
    traces = _random_traces(10_000, rng)
    start = time.perf_counter()
    # one streaming tracker over all traces; shorter ones repeat their last
    # value, which cannot trigger a further entry or re-entry
    width = max(len(w) for w in traces)
    padded = np.array([np.concatenate([w, np.full(width - len(w), w[-1])]) for w in traces])
    tr = ExcursionTracker(len(traces), cfg)
    for t in range(width):
        tr.update(padded[:, t])
    mismatches = 0
    total_flips = 0
    for i, w in enumerate(traces):
        sigma, tau, keff = _brute_force(w.tolist(), cfg.rho, cfg.epsilon)
        rec = excursions(w, cfg)
        total_flips += keff
        ok = (rec.sigma == sigma and rec.tau == tau and rec.k_eff == keff
              and tr.k_eff[i] == keff and tr.n_T[i] == max(len(sigma) - 1, 0))
        mismatches += not ok
    elapsed = time.perf_counter() - start
    _note(record_property, mismatches=mismatches, seconds=elapsed, total_keff=total_flips)
    assert total_flips > 0
    assert mismatches == 0
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 2. ZIG recovery
# ---------------------------------------------------------------------------

def test_criterion_02_zig_recovery(record_property):
    fit = fit_zig(sample_zig(0.3, 0.6, 100_000, RandomSource(7)))
    _note(record_property, h_hat=fit.h_hat, g_hat=fit.g_hat)
    assert abs(fit.h_hat - 0.3) < 0.01
    assert abs(fit.g_hat - 0.6) < 0.01


# ---------------------------------------------------------------------------
# 3 and 4. geometric tail and sign persistence on the char-window MLP
# ---------------------------------------------------------------------------

def test_criterion_03_geometric_tail(run_cache, record_property):
    start = time.perf_counter()
    art = run_cache(seed=0)
    elapsed = time.perf_counter() - start
    k = art.flips.k_eff
    frac0 = float(np.mean(k == 0))
    tail = geometric_tail_fit(k, min_support=10)
    _note(record_property, frac_keff0=frac0, r2=tail.r2, points=int(tail.ks.size), seconds=elapsed)
    assert art.config.optim.lr == 3e-4 and art.config.steps == 2000
    assert tail.r2 >= 0.9
    assert elapsed < 300
    assert frac0 >= 0.8


def test_criterion_04_sign_persistence(run_cache, record_property):
    art = run_cache(seed=0)
    worst = float(art.flips.flip_curve.max())
    _note(record_property, max_flip_t=worst)
    assert worst < 0.5


# ---------------------------------------------------------------------------
# 5 and 6. interventions
# ---------------------------------------------------------------------------

def _zig_mean(run_cache, which, **overrides):
    return float(np.mean([getattr(run_cache(seed=s, **overrides).zig, which) for s in SEEDS]))


def test_criterion_05_intervention_monotonicity(run_cache, record_property):
    h = [_zig_mean(run_cache, "h_hat", **{"interventions.a_init": a}) for a in (0.0, 0.02, 0.05)]
    g = [_zig_mean(run_cache, "g_hat", **{"interventions.a_init": 0.02, "interventions.barrier_lambda": lam})
         for lam in (1e-4, 1e-2, 0.3)]
    _note(record_property, h_by_a=", ".join(f"{x:.4f}" for x in h), g_by_lambda=", ".join(f"{x:.4f}" for x in g))
    assert h[0] >= h[1] >= h[2]
    assert g[0] >= g[1] >= g[2]


def test_criterion_06_flip_suppression(run_cache, record_property):
    base_val = np.mean([run_cache(seed=s).val_loss for s in SEEDS])
    candidates = [{"interventions.a_init": 0.02, "interventions.barrier_lambda": lam} for lam in (1e-4, 1e-2, 0.3)]
    candidates.append({"interventions.a_init": 0.05})
    best = None
    for c in candidates:
        fm = np.mean([run_cache(seed=s, **c).flips.flip_mean for s in SEEDS])
        val = np.mean([run_cache(seed=s, **c).val_loss for s in SEEDS])
        if fm <= 1e-3 and val <= 1.10 * base_val and (best is None or fm < best[1]):
            best = (c, fm, val)
    base_fm = np.mean([run_cache(seed=s).flips.flip_mean for s in SEEDS])
    _note(record_property, baseline_flip_mean=float(base_fm), baseline_val=float(base_val))
    assert best is not None
    _note(record_property, a_init=best[0]["interventions.a_init"],
          lam=best[0].get("interventions.barrier_lambda", 0.0),
          flip_mean=float(best[1]), val_ratio=float(best[2] / base_val))


# ---------------------------------------------------------------------------
# 7 and 8. compressibility and randomness of sign matrices
# ---------------------------------------------------------------------------

def test_criterion_07_compressibility_ordering(run_cache, record_property):
    art = run_cache(seed=0)
    q = 1 / 16
    gaps = {}
    for W in art.weights(hidden_layers(art)):
        c = svd_curve(W, (q,))
        gaps[W.name] = (float(c.e_sign[0]), float(c.e_mag[0]))
    locked = run_cache(seed=0, **TEMPLATE_LOCKED)
    e2 = {}
    for W in locked.weights(hidden_layers(locked)):
        S, _ = sign_decompose(W)
        e2[W.name] = rank_error(S.astype(np.float64), 2)
    _note(record_property, baseline=", ".join(f"{k}: {s:.3f}>{m:.3f}" for k, (s, m) in gaps.items()),
          template_E2=", ".join(f"{k}: {v:.3f}" for k, v in e2.items()))
    assert all(s > m for s, m in gaps.values())
    assert all(v <= 0.05 for v in e2.values())


def test_criterion_08_randomness_probe(run_cache, record_property):
    art = run_cache(seed=0)
    rng = RandomSource(0)
    trained = ks_probe(art.weights(), rng.fork("trained"))
    locked = run_cache(seed=0, **TEMPLATE_LOCKED)
    tmpl = ks_probe([WeightMatrix(k, v) for k, v in locked.templates.items()], rng.fork("template"))
    _note(record_property, trained_D=trained.pooled_D, template_D=tmpl.pooled_D)
    assert trained.pooled_D < 0.05
    assert tmpl.pooled_D > 0.2


# ---------------------------------------------------------------------------
# 9. entropy proxy
# ---------------------------------------------------------------------------

def test_criterion_09_entropy_proxy(record_property):
    rng = RandomSource(9)
    H = patch_entropy(rademacher_matrix(2048, 2048, rng), 100_000, rng.fork("patches"))
    H0 = patch_entropy(np.ones((64, 64), dtype=np.int8), 10_000, rng.fork("const"))
    _note(record_property, rademacher_H=H, constant_H=H0)
    assert H >= 0.99
    assert H0 == 0
    assert rd_lower_bound(1.0, 0.0) == 0.5
    assert rd_lower_bound(0.8, 0.8) == 0 and rd_lower_bound(0.3, 0.9) == 0


# ---------------------------------------------------------------------------
# 10. closed forms
# ---------------------------------------------------------------------------

def test_criterion_10_closed_form_exactness(record_property):
    worst = 0.0
    for N in (2, 7, 100, 10_000):
        direct = schedule_sums(Schedule("warmup_cosine", 1.0, T=N))
        closed = cosine_sums_closed_form(1.0, N)
        for a, b in zip(direct, closed):
            worst = max(worst, abs(a - b) / abs(b))
    _note(record_property, worst_rel_err=worst)
    assert worst <= 1e-9
    assert bpw_svd(256, 256, 8, 4) == pytest.approx(16416 / 65536, abs=0) and bpw_svd(4, 4, 4, 4) == 9
    assert bpw_csr(100, 100, 100) == pytest.approx(0.6832, abs=0)
    assert rank_for_target(256, 256, 4, 0.25) == 7
    assert quantize_codes(0.35, 4, 0.1) == 4 and quantize(0.35, 4, 0.1) == 0.1 * 4
    assert quantize_codes(10.0, 4, 0.1) == 7 and quantize(10.0, 4, 0.1) == 0.1 * 7
    for b in range(2, 9):
        alpha = 0.37
        book = codebook(b, alpha)
        assert np.array_equal(quantize(book, b, alpha), book)
        assert np.array_equal(quantize_codes(book, b, alpha), np.arange(-(2 ** (b - 1)), 2 ** (b - 1)))
        x = np.random.default_rng(b).normal(size=1000)
        a = scale_for(x, b)
        q = quantize(x, b, a)
        assert np.array_equal(quantize(q, b, a), q)


# ---------------------------------------------------------------------------
# 11. bounds
# ---------------------------------------------------------------------------

def test_criterion_11_bound_behavior(record_property):
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(1000):
        rho = rng.uniform(0.01, 2.0)
        p = SgdBoundParams(rng.uniform(1e-3, 1.0), rng.uniform(1e-3, 0.5), rng.uniform(0, 0.1),
                           rng.uniform(0.1, 10), rng.uniform(0, 1), rng.uniform(0, 1),
                           rho, rho * rng.uniform(0.01, 0.9))
        L, L2 = rng.uniform(0, 1), rng.uniform(0, 1)
        g0 = g_sgd_from_sums(p, L, L2).g
        dl, dl2 = rng.uniform(0, 0.5, size=2)
        violations += g_sgd_from_sums(p, L + dl, L2).g < g0
        violations += g_sgd_from_sums(p, L, L2 + dl2).g < g0
    rep = schedule_order_check(ORDER_PARAMS)
    _note(record_property, monotone_violations=violations,
          order=" < ".join(rep.order), conditional=rep.cos_exp_conditional)
    assert violations == 0
    assert all(b.a > 0 for b in rep.bounds.values())
    assert rep.holds, rep.violations


# ---------------------------------------------------------------------------
# 12. floating mode
# ---------------------------------------------------------------------------

FLOATING = {"interventions.float_lambda": 1e4, "interventions.rho_f": 1e-2}


def test_criterion_12_floating_mode(run_cache, record_property):
    base = run_cache(seed=0)
    flo = run_cache(seed=0, **FLOATING)
    ratio = flo.flips.flip_mean / base.flips.flip_mean
    hist = np.bincount(flo.flips.k_eff)
    mode = int(np.argmax(hist))
    cfg = StoppingConfig()
    tr = track_traces(mixing_traces(5000, 8, cfg, RandomSource(12)), cfg)
    gof = floating_gof(tr.k_eff, tr.n_T)
    _note(record_property, flip_ratio_vs_baseline=float(ratio), keff_mode=mode, gof_p=gof.p_value)
    assert gof.p_value > 0.01
    assert ratio >= 100
    assert mode > 0


# ---------------------------------------------------------------------------
# 13. sub-bit ordering end to end
# ---------------------------------------------------------------------------

def test_criterion_13_subbit_ordering(run_cache, record_property):
    results = {}
    for task, extra in (("char", {}), ("clusters", CLUSTERS)):
        for s in SEEDS:
            locked = evaluate_compressed(run_cache(seed=s, **extra, **TEMPLATE_LOCKED), "template", 0.25,
                                         precondition="zscore")
            raw = evaluate_compressed(run_cache(seed=s, **extra), "raw", 0.25)
            results[(task, s)] = (locked, raw)
    _note(record_property, **{f"{t}/s{s}": f"locked {a.val_loss:.3f} raw {b.val_loss:.3f} bpw {a.bpw_eff:.3f}"
                               for (t, s), (a, b) in results.items()})
    assert all(a.bpw_eff <= 0.25 and b.bpw_eff <= 0.25 for a, b in results.values())
    assert all(abs(a.bpw_eff - b.bpw_eff) < 1e-12 for a, b in results.values())
    assert all(a.val_loss < b.val_loss for a, b in results.values())


# ---------------------------------------------------------------------------
# 14. gradient checks
# ---------------------------------------------------------------------------

def _fd_rel_error(f, grad, W, h, mask):
    errs = []
    for idx in zip(*np.nonzero(mask)):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        fd = (f(Wp) - f(Wm)) / (2 * h)
        errs.append(abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-30))
    return max(errs)


def test_criterion_14_gradient_checks(record_property):
    rng = np.random.default_rng(14)
    h = 1e-7
    W = rng.normal(scale=0.02, size=(8, 9))
    away = (np.abs(np.abs(W) - 0.02) > 1e-3) & (np.abs(W) > 1e-3)
    active = away & (np.abs(W) < 0.02)
    e_bar = _fd_rel_error(lambda X: barrier_penalty(X, 0.02)[0], barrier_penalty(W, 0.02)[1], W, h, active)
    V = rng.normal(scale=0.01, size=(8, 9))
    away_f = (np.abs(np.abs(V) - 0.01) > 1e-3) & (np.abs(V) > 1e-3)
    e_flo = _fd_rel_error(lambda X: floating_penalty(X, 0.01)[0], floating_penalty(V, 0.01)[1], V, h,
                          away_f & (np.abs(V) < 0.01))

    src = RandomSource(14)
    params = init_params([12, 10, 8, 5], 0.4, src)
    X = src.normal((1, 12))
    y = np.array([3])
    _, grads = forward_backward(params, X, y)
    keys = list(params)
    errs = []
    for _ in range(100):
        k = keys[rng.integers(len(keys))]
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + 1e-4
        up = loss(params, X, y)
        params[k][idx] = old - 1e-4
        dn = loss(params, X, y)
        params[k][idx] = old
        fd = (up - dn) / 2e-4
        errs.append(abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-8))
    e_mlp = max(errs)
    _note(record_property, barrier=e_bar, floating=e_flo, mlp=e_mlp)
    assert e_bar < 1e-5 and e_flo < 1e-5
    assert e_mlp < 1e-4
