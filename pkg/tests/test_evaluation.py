import itertools

import numpy as np
import pytest

from hmra2d.evaluation import (
    brute_force_assignment,
    coefficient_alignment,
    coefficient_distance,
    evaluate_estimate,
    golden_section,
    hungarian_assignment,
    matched_coefficient_distance,
    matched_set_distance,
    rotational_distance,
    tv_distance,
)
from hmra2d.observation_model import generate_phantoms, rotate_image
from hmra2d.steerable_basis import rotate_coefficients

from conftest import random_coeffs


def test_golden_section_finds_minimum():
    x, fx = golden_section(lambda t: (t - 0.3217) ** 2, 0.0, 1.0, tol=1e-8)
    assert abs(x - 0.3217) <= 1e-7
    assert fx <= 1e-14


def test_distance_to_itself(phantoms65):
    d, theta = rotational_distance(phantoms65[0], phantoms65[0])
    assert d <= 1e-12
    assert theta == pytest.approx(0.0, abs=1e-4)


def test_distance_to_rotated_copy(phantoms65):
    I = phantoms65[0]
    d, theta = rotational_distance(I, rotate_image(I, 1.0))
    assert d <= 0.02 * np.linalg.norm(I)
    assert abs(theta - 1.0) <= 0.01


def test_distance_to_negation(phantoms65):
    I = phantoms65[1]
    d, _ = rotational_distance(I, -I)
    assert d >= np.linalg.norm(I[np.hypot(*np.mgrid[-32:33, -32:33]) <= 32])


def test_size_mismatch(phantoms65):
    with pytest.raises(ValueError):
        rotational_distance(phantoms65[0], np.zeros((33, 33)))
    with pytest.raises(ValueError):
        matched_set_distance(phantoms65, phantoms65[:2])


def test_shuffled_rotated_set(phantoms65):
    shuffle = [2, 0, 1]
    est = np.stack([rotate_image(phantoms65[j], a) for j, a in zip(shuffle, (0.5, 2.0, 4.0))])
    rep = matched_set_distance(phantoms65, est)
    assert rep.dist_r <= 0.02
    # truth i pairs with the estimate holding phantom i
    inverse = np.argsort(shuffle) + 1
    assert rep.permutation.tolist() == inverse.tolist()


def test_single_class_reduces_to_rotational_distance(phantoms65):
    J = rotate_image(phantoms65[1], 0.7) + 0.1
    rep = matched_set_distance(phantoms65[:1], J[None])
    d, theta = rotational_distance(phantoms65[0], J)
    assert rep.dist == pytest.approx(d)
    assert rep.aligning_angles[0] == pytest.approx(theta)


def test_hungarian_matches_brute_force():
    I = generate_phantoms(6, 33, seed=3)
    D = np.array([[rotational_distance(a, b)[0] ** 2 for b in I[3:]] for a in I[:3]])
    best = min(itertools.permutations(range(3)), key=lambda p: sum(D[i, p[i]] for i in range(3)))
    assert hungarian_assignment(D).tolist() == list(best)
    assert brute_force_assignment(D).tolist() == list(best)
    rng = np.random.default_rng(0)
    for _ in range(20):
        D = rng.random((6, 6))
        a, b = hungarian_assignment(D), brute_force_assignment(D)
        assert D[np.arange(6), a].sum() == pytest.approx(D[np.arange(6), b].sum())


def test_symmetry_exact_rotation(fb65):
    I = generate_phantoms(4, 65, seed=4)
    a = fb65.expand(I)
    imgs = fb65.synthesize(a)
    forward = matched_coefficient_distance(imgs[:2], a[2:], fb65).dist
    backward = matched_coefficient_distance(imgs[2:], a[:2], fb65).dist
    assert backward == pytest.approx(forward, rel=1e-3)


def test_symmetry_and_rotation_invariance_pixel():
    # bilinear interpolation breaks exact symmetry; smooth images keep it small
    I = generate_phantoms(4, 65, seed=4, widths=(0.1, 0.22))
    truth, est = I[:2], I[2:]
    forward = matched_set_distance(truth, est).dist
    backward = matched_set_distance(est, truth).dist
    assert backward == pytest.approx(forward, rel=5e-3)
    rotated = np.stack([rotate_image(e, a) for e, a in zip(est, (np.pi / 2, np.pi))])
    assert matched_set_distance(truth, rotated).dist == pytest.approx(forward, rel=1e-3)


def test_tv_distance():
    assert tv_distance([0.2, 0.8], [0.2, 0.8]) == 0
    assert tv_distance([0.3, 0.7], [0.5, 0.5]) == pytest.approx(0.2)
    assert tv_distance([0.7, 0.3], [0.3, 0.7], [2, 1]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        tv_distance([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        tv_distance([0.5, 0.5], [0.5, 0.5], [1, 1])
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


def test_coefficient_distance_matches_synthesis(fb33):
    rng = np.random.default_rng(1)
    a = random_coeffs(rng, fb33.ks) * 0.1
    J = generate_phantoms(1, 33, seed=2)[0]
    d, theta = coefficient_distance(a, J, fb33)
    direct = np.linalg.norm((fb33.synthesize(rotate_coefficients(a, theta, fb33)) - J)[fb33.mask])
    assert d == pytest.approx(direct, rel=1e-9)
    # a grid of exact synthesis never beats it
    grid = [
        np.linalg.norm((fb33.synthesize(rotate_coefficients(a, t, fb33)) - J)[fb33.mask])
        for t in np.linspace(0, 2 * np.pi, 97)
    ]
    assert d <= min(grid) + 1e-9


def test_coefficient_distance_recovers_angle(fb33):
    rng = np.random.default_rng(2)
    a = random_coeffs(rng, fb33.ks)
    J = fb33.synthesize(rotate_coefficients(a, 2.5, fb33))
    d, theta = coefficient_distance(a, J, fb33)
    assert theta == pytest.approx(2.5, abs=1e-4)
    d, theta = coefficient_distance(a, J, fb33, tol=1e-10)
    assert d <= 1e-6 * np.linalg.norm(J)
    assert theta == pytest.approx(2.5, abs=1e-8)


def test_coefficient_alignment():
    ks = np.repeat(np.arange(5), 2)
    rng = np.random.default_rng(3)
    a = random_coeffs(rng, ks)
    d, theta = coefficient_alignment(a, rotate_coefficients(a, 4.0, ks), ks, tol=1e-10)
    assert d <= 1e-8
    assert theta == pytest.approx(4.0, abs=1e-8)


def test_report_consistency(fb33):
    I = generate_phantoms(2, 33, seed=5)
    truth_coeffs = fb33.expand(I)
    rng = np.random.default_rng(4)
    truth_spca = truth_coeffs + 0.05 * random_coeffs(rng, fb33.ks, 2)
    estimate = np.stack([rotate_coefficients(c, t, fb33) for c, t in zip(truth_spca[::-1], (0.4, 1.9))])
    rep = evaluate_estimate(I, truth_spca, estimate, fb33, pi=[0.4, 0.6], pi_hat=[0.6, 0.4])
    spca = matched_coefficient_distance(I, truth_spca, fb33)
    assert rep.spca_error == spca.dist_r
    assert rep.estimation_error <= 1e-3
    assert rep.permutation.tolist() == [2, 1]
    assert rep.tv_distance == pytest.approx(0.0)
    assert 0 <= rep.tv_distance <= 1 and rep.dist_r >= 0
    out = rep.to_dict()
    assert out["permutation"] == [2, 1]


def test_pixel_and_coefficient_metrics_agree(fb65, phantoms65):
    coeffs = fb65.expand(phantoms65)
    est = np.stack([rotate_coefficients(c, t, fb65) for c, t in zip(coeffs, (0.3, 1.1, 2.9))])
    pixel = matched_set_distance(phantoms65, fb65.synthesize(est))
    exact = matched_coefficient_distance(phantoms65, est, fb65)
    assert exact.permutation.tolist() == pixel.permutation.tolist() == [1, 2, 3]
    # exact rotation has no interpolation error
    assert exact.dist_r <= 1e-3 and pixel.dist_r <= 0.05
    np.testing.assert_allclose(exact.aligning_angles, pixel.aligning_angles, atol=0.01)
