import time

import numpy as np
import pytest

from hmra2d.em_baseline import EMOptions, _log_posterior, em_classify, responsibilities
from hmra2d.evaluation import coefficient_alignment
from hmra2d.steerable_basis import rotate_coefficients

from conftest import random_coeffs

KS = np.repeat(np.arange(6), [4, 3, 3, 2, 2, 1])
WEIGHTS = np.where(KS == 0, 1.0, 2.0)


def _rotated_stack(rng, classes, N, sigma):
    labels = rng.integers(0, classes.shape[0], N)
    angles = rng.uniform(0, 2 * np.pi, N)
    Y = np.stack([rotate_coefficients(classes[j], t, KS) for j, t in zip(labels, angles)])
    noise = rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)
    noise /= np.sqrt(WEIGHTS)
    noise[:, KS == 0] = noise[:, KS == 0].real
    return Y + sigma * noise, labels


def _coeff_norm(a):
    return np.sqrt(np.sum(WEIGHTS * np.abs(a) ** 2))


def test_options_validation():
    with pytest.raises(ValueError):
        EMOptions(K=1, R=0, sigma2=1.0)
    with pytest.raises(ValueError):
        EMOptions(K=0, R=4, sigma2=1.0)
    with pytest.raises(ValueError):
        EMOptions(K=1, R=4, sigma2=0.0)
    with pytest.raises(ValueError):
        EMOptions(K=1, R=4, sigma2=1.0, restarts=0)
    np.testing.assert_allclose(EMOptions(K=1, R=4, sigma2=1.0).angles, [0, np.pi / 2, np.pi, 3 * np.pi / 2])


def test_needs_enough_observations():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        em_classify(random_coeffs(rng, KS, 2), EMOptions(K=3, R=4, sigma2=1.0), KS)


def test_responsibilities_normalized():
    rng = np.random.default_rng(1)
    Y = random_coeffs(rng, KS, 50) * 3
    coeffs = random_coeffs(rng, KS, 3)
    gamma, _ = responsibilities(Y, coeffs, [0.2, 0.3, 0.5], 0.05, 16, KS)
    assert gamma.shape == (50, 3, 16)
    np.testing.assert_allclose(gamma.sum(axis=(1, 2)), 1.0, atol=1e-12)
    assert np.all(gamma >= 0)


def test_log_posterior_matches_direct_norm():
    rng = np.random.default_rng(2)
    Y = random_coeffs(rng, KS, 4)
    coeffs = random_coeffs(rng, KS, 2)
    angles = 2 * np.pi * np.arange(5) / 5
    lp = _log_posterior(Y, coeffs, np.array([0.4, 0.6]), 0.7, angles, KS)
    for i, j, r in np.ndindex(lp.shape):
        d = Y[i] - rotate_coefficients(coeffs[j], angles[r], KS)
        want = np.log([0.4, 0.6][j] / 5) - np.sum(WEIGHTS * np.abs(d) ** 2) / (2 * 0.7)
        assert lp[i, j, r] == pytest.approx(want, rel=1e-12)


def test_small_noise_single_class_recovery():
    rng = np.random.default_rng(3)
    truth = random_coeffs(rng, KS)
    Y, _ = _rotated_stack(rng, truth[None], 500, 0.0)
    res = em_classify(Y, EMOptions(K=1, R=64, sigma2=1e-6, seed=4), KS)
    d, _ = coefficient_alignment(truth, res.coeffs[0], KS)
    assert d / _coeff_norm(truth) <= 0.05
    assert res.weights.tolist() == [1.0]


def test_likelihood_monotone_and_labels():
    rng = np.random.default_rng(5)
    classes = random_coeffs(rng, KS, 2) * 2
    Y, labels = _rotated_stack(rng, classes, 800, 0.5)
    res = em_classify(Y, EMOptions(K=2, R=32, sigma2=0.25, seed=6, restarts=2), KS)
    ll = np.asarray(res.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))
    assert res.weights.sum() == pytest.approx(1.0)
    # labels agree with the truth up to relabeling
    agree = max(np.mean(res.labels - 1 == labels), np.mean(res.labels - 1 != labels))
    assert agree >= 0.95
    assert np.all((res.confidence > 0) & (res.confidence <= 1 + 1e-12))


def test_fixed_weights_kept():
    rng = np.random.default_rng(7)
    classes = random_coeffs(rng, KS, 2)
    Y, _ = _rotated_stack(rng, classes, 200, 0.3)
    res = em_classify(Y, EMOptions(K=2, R=8, sigma2=0.09, fix_weights=[0.5, 0.5], max_iterations=5), KS)
    assert res.weights.tolist() == [0.5, 0.5]


def test_deterministic():
    rng = np.random.default_rng(8)
    Y, _ = _rotated_stack(rng, random_coeffs(rng, KS, 2), 300, 0.5)
    opts = EMOptions(K=2, R=16, sigma2=0.25, seed=9, max_iterations=20)
    a, b = em_classify(Y, opts, KS), em_classify(Y, opts, KS)
    assert np.array_equal(a.coeffs, b.coeffs) and a.log_likelihood == b.log_likelihood


def test_cost_grows_with_rotations():
    rng = np.random.default_rng(10)
    ks = np.repeat(np.arange(20), 6)
    Y = random_coeffs(rng, ks, 4000)
    coeffs = random_coeffs(rng, ks, 5)

    def cost(R):
        angles = 2 * np.pi * np.arange(R) / R
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            _log_posterior(Y, coeffs, np.full(5, 0.2), 1.0, angles, ks)
            best = min(best, time.perf_counter() - t0)
        return best

    assert cost(64) >= 1.8 * cost(32)
