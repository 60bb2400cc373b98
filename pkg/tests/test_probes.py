from __future__ import annotations

import numpy as np
import pytest

from signlock.errors import ConfigError
from signlock.interventions import TemplateConfig, make_template
from signlock.matio import WeightMatrix
from signlock.numerics import RandomSource, rademacher_matrix, rank_error
from signlock.probes import (
    aggregate_weighted,
    entropy_probe,
    ks_probe,
    patch_entropy,
    rank_for_ratio,
    rd_lower_bound,
    spectral_randomness_probe,
    svd_curve,
    svd_probe,
)


def test_rank_for_ratio_rounding():
    assert rank_for_ratio(1 / 16, 256) == 16
    assert rank_for_ratio(1e-6, 256) == 1
    assert rank_for_ratio(1.0, 256) == 256
    assert rank_for_ratio(0.5, 5) == 3  # 2.5 rounds half up


def test_svd_curve_rank_one_magnitude():
    A = np.outer(np.arange(1, 9), np.arange(1, 11)).astype(float)
    c = svd_curve(WeightMatrix("w", A))
    # all-positive sign matrix is rank 1 as well
    assert np.allclose(c.e_mag, 0, atol=1e-10)
    assert np.allclose(c.e_sign, 0, atol=1e-10)


def test_svd_curve_matches_direct_rank_error():
    rng = RandomSource(1)
    W = WeightMatrix("w", rng.normal((40, 30)))
    c = svd_curve(W)
    S = np.where(W.data >= 0, 1.0, -1.0)
    for r, e in zip(c.ranks, c.e_sign):
        assert e == pytest.approx(rank_error(S, int(r)), abs=1e-12)
    assert c.e_sign[-1] == pytest.approx(0, abs=1e-12)


def test_template_sign_more_compressible_than_random():
    rng = RandomSource(2)
    T = make_template(128, 128, TemplateConfig(2, 5)).astype(float)
    R = rademacher_matrix(128, 128, rng).astype(float)
    q = 4 / 128
    r = rank_for_ratio(q, 128)
    assert rank_error(T, r) < rank_error(R, r)


def test_svd_probe_mean_and_rows():
    rng = RandomSource(3)
    layers = [WeightMatrix(f"l{i}", rng.normal((16, 16))) for i in range(3)]
    rep = svd_probe(layers)
    stacked = np.stack([c.e_sign for c in rep.layers])
    assert np.allclose(rep.mean_sign, stacked.mean(axis=0))
    rows = list(rep.rows())
    assert len(rows) == 2 * len(rep.q) * 4


def test_ks_rademacher_small_and_constant_large():
    rng = RandomSource(4)
    R = rademacher_matrix(128, 128, rng)
    assert spectral_randomness_probe(R, rng.fork("a"), s_max=128).pooled_D < 0.05
    ones = np.ones((128, 128), dtype=np.int8)
    assert spectral_randomness_probe(ones, rng.fork("b"), s_max=128).pooled_D > 0.5


def test_ks_template_large():
    T = make_template(256, 256, TemplateConfig(2, 9))
    assert spectral_randomness_probe(T, RandomSource(5)).pooled_D > 0.2


def test_ks_skip_small_layer():
    rep = ks_probe([WeightMatrix("tiny", np.ones((16, 16)))], RandomSource(0))
    assert rep.layers[0].skipped and rep.pooled_D is None


def test_patch_entropy_examples():
    assert patch_entropy(np.ones((50, 50), dtype=np.int8), 5000, RandomSource(0)) == 0
    i, j = np.indices((64, 64))
    checker = np.where((i + j) % 2 == 0, 1, -1)
    assert patch_entropy(checker, 20000, RandomSource(1)) == pytest.approx(1 / 9, abs=1e-3)


def test_patch_entropy_sign_flip_invariant():
    S = rademacher_matrix(40, 40, RandomSource(6))
    a = patch_entropy(S, 3000, RandomSource(7))
    b = patch_entropy(-S, 3000, RandomSource(7))
    assert a == pytest.approx(b, abs=1e-12)


def test_entropy_probe_skips_tiny():
    rep = entropy_probe([WeightMatrix("a", np.ones((2, 8))), WeightMatrix("b", np.ones((8, 8)))],
                        RandomSource(0), n_patches=100)
    assert list(rep.layers) == ["b"]
    with pytest.raises(ConfigError):
        entropy_probe([WeightMatrix("a", np.ones((2, 2)))], RandomSource(0))


def test_rd_lower_bound():
    assert rd_lower_bound(1.0, 0.0) == pytest.approx(0.5, abs=1e-12)
    assert rd_lower_bound(0.7, 0.7) == 0
    assert rd_lower_bound(0.7, 0.9) == 0
    assert rd_lower_bound(0.9, 0.4) == pytest.approx(0.1100, abs=1e-3)


def test_aggregate_weighted():
    assert aggregate_weighted([0.3], [7]) == 0.3
    assert aggregate_weighted([1.0, 0.0], [1, 3]) == 0.25
    assert aggregate_weighted([0.2, 0.4], [5, 5]) == pytest.approx(0.3)
