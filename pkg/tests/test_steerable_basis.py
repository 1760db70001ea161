import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmra2d.observation_model import generate_phantoms, rotate_image
from hmra2d.steerable_basis import (
    FBBasis,
    bessel_roots,
    build_basis,
    disk_mask,
    pixel_coordinates,
    rotate_coefficients,
)

from conftest import random_coeffs


def _bessel_series(n, x):
    # ascending series, fine for the small arguments used here
    total, term = 0.0, (x / 2) ** n / math.factorial(n)
    m = 0
    while abs(term) > 1e-18 or m < 5:
        total += term
        m += 1
        term *= -((x / 2) ** 2) / (m * (m + n))
    return total


def _first_root(n, lo, hi, tol=1e-12):
    flo = _bessel_series(n, lo)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        fm = _bessel_series(n, mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return (lo + hi) / 2


def test_first_roots_match_series_bisection():
    r0 = bessel_roots(0, 10)[0]
    r1 = bessel_roots(1, 10)[0]
    assert abs(r0 - _first_root(0, 2.0, 3.0)) < 1e-11
    assert abs(r1 - _first_root(1, 3.0, 4.5)) < 1e-11
    assert abs(r0 - 2.404825557695773) < 1e-12
    assert abs(r1 - 3.831705970207512) < 1e-12


def test_roots_increasing_and_truncated(fb65):
    cut = 2 * np.pi * fb65.c * 0.5
    assert np.all(fb65.roots <= cut)
    assert fb65.cutoff == pytest.approx(cut)
    for k in range(fb65.k_max + 1):
        r = fb65.roots[fb65.block(k)]
        assert np.all(np.diff(r) > 0)
        # the next root of J_k is beyond the cut
        nxt = bessel_roots(k, cut + 10)[r.size]
        assert nxt > cut
    assert fb65.k_max <= 2 * fb65.c
    # k_max is set by the cutoff or by the 2c cap
    assert fb65.k_max == 2 * fb65.c or bessel_roots(fb65.k_max + 1, cut).size == 0
    fb = build_basis(33, bandlimit=0.2)
    assert fb.k_max < 2 * fb.c
    assert bessel_roots(fb.k_max + 1, fb.cutoff).size == 0


def test_normalization_constants(fb33):
    from scipy.special import jv

    expected = 1 / (fb33.c * np.sqrt(np.pi) * np.abs(jv(fb33.ks + 1, fb33.roots)))
    np.testing.assert_allclose(fb33.norms, expected, rtol=1e-14)


def test_design_matrix_columns_near_unit(fb65):
    norms = np.linalg.norm(fb65.design_matrix, axis=0)
    assert np.all(np.abs(norms - 1) < 0.1)
    np.testing.assert_allclose(fb65.column_norms(), norms, rtol=1e-10)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        FBBasis(8)
    with pytest.raises(ValueError):
        FBBasis(33, bandlimit=0.6)
    with pytest.raises(ValueError):
        FBBasis(7)
    fb = FBBasis(20, allow_even=True)
    assert fb.count > 0


def test_zero_image_and_zero_coeffs(fb33):
    assert np.all(fb33.expand(np.zeros((33, 33))) == 0)
    assert np.all(fb33.synthesize(np.zeros(fb33.count)) == 0)


def test_expand_single_basis_function(fb65):
    x, y = pixel_coordinates(65)
    u = fb65.evaluate_functions(x, y)[..., 0].real
    a = fb65.expand(u)
    assert abs(abs(a[0]) - 1) < 0.05
    assert np.all(np.abs(a[1:]) <= 0.05)


def test_expand_is_linear(fb33):
    rng = np.random.default_rng(0)
    I1, I2 = rng.standard_normal((2, 33, 33))
    lhs = fb33.expand(2.5 * I1 - 0.7 * I2)
    rhs = 2.5 * fb33.expand(I1) - 0.7 * fb33.expand(I2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_expand_matches_dense_least_squares(fb33):
    rng = np.random.default_rng(1)
    img = rng.standard_normal((33, 33))
    B = fb33.design_matrix
    ks = fb33.ks
    # real parameterization: image = B0 a0 + 2 Re(Bp ap)
    cols = [B[:, ks == 0].real, 2 * B[:, ks > 0].real, -2 * B[:, ks > 0].imag]
    A = np.concatenate(cols, axis=1)
    sol, *_ = np.linalg.lstsq(A, img[fb33.mask], rcond=None)
    n0, npos = int((ks == 0).sum()), int((ks > 0).sum())
    ref = np.zeros(fb33.count, dtype=complex)
    ref[ks == 0] = sol[:n0]
    ref[ks > 0] = sol[n0 : n0 + npos] + 1j * sol[n0 + npos :]
    np.testing.assert_allclose(fb33.expand(img), ref, atol=1e-9)


def test_synthesize_matches_design_matrix(fb33):
    rng = np.random.default_rng(2)
    a = random_coeffs(rng, fb33.ks)
    B = fb33.design_matrix
    kp = fb33.ks > 0
    ref = B[:, ~kp] @ a[~kp] + 2 * np.real(B[:, kp] @ a[kp])
    img = fb33.synthesize(a)
    np.testing.assert_allclose(img[fb33.mask], ref.real, atol=1e-12)
    assert np.all(img[~fb33.mask] == 0)


def test_round_trip_in_column_space(fb65):
    rng = np.random.default_rng(3)
    a = random_coeffs(rng, fb65.ks)
    back = fb65.expand(fb65.synthesize(a))
    assert np.linalg.norm(back - a) / np.linalg.norm(a) <= 1e-6


def test_synthesize_is_real(fb65):
    rng = np.random.default_rng(4)
    _, imag = fb65.synthesize(random_coeffs(rng, fb65.ks), return_imag=True)
    assert imag <= 1e-12


def test_truncation_error_band():
    fb = build_basis(129)
    I = generate_phantoms(2, 129, seed=0)
    rec = fb.synthesize(fb.expand(I))
    m = fb.mask
    err = np.linalg.norm((rec - I)[:, m]) / np.linalg.norm(I[:, m])
    assert err <= 0.25


def test_parseval_stability(fb65, phantoms65):
    rng = np.random.default_rng(5)
    images = list(phantoms65) + list(rng.standard_normal((3, 65, 65)))
    for img in images:
        a = fb65.expand(img)
        assert np.linalg.norm(a) <= 1.1 * np.linalg.norm(img[fb65.mask])


def test_rotate_coefficients_identity_and_k0(fb33):
    rng = np.random.default_rng(6)
    a = random_coeffs(rng, fb33.ks)
    assert np.array_equal(rotate_coefficients(a, 0.0, fb33), a)
    r = rotate_coefficients(a, 1.3, fb33)
    assert np.array_equal(r[fb33.ks == 0], a[fb33.ks == 0])


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-10, 10, allow_nan=False),
    st.floats(-10, 10, allow_nan=False),
    st.integers(0, 2**32 - 1),
)
def test_steerability_composes(alpha, beta, seed):
    ks = np.repeat(np.arange(6), [3, 3, 2, 2, 1, 1])
    a = random_coeffs(np.random.default_rng(seed), ks)
    lhs = rotate_coefficients(rotate_coefficients(a, alpha, ks), beta, ks)
    rhs = rotate_coefficients(a, alpha + beta, ks)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(a).max())


def test_quarter_turn_rotation_is_exact(fb65, phantoms65):
    a = fb65.expand(phantoms65[0])
    rot = fb65.expand(rotate_image(phantoms65[0], np.pi / 2))
    np.testing.assert_allclose(rot, rotate_coefficients(a, np.pi / 2, fb65), atol=1e-12)


@pytest.mark.parametrize("L", [65, 129])
def test_pixel_rotation_matches_coefficient_rotation(L):
    fb = build_basis(L)
    I = generate_phantoms(1, L, seed=3)[0]
    a = fb.expand(I)
    for alpha in (0.3, 1.0, 2.2):
        lhs = fb.expand(rotate_image(I, alpha))
        rhs = rotate_coefficients(a, alpha, fb)
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) <= 0.03


def test_noise_blocks_whiten_pure_noise(fb33):
    rng = np.random.default_rng(7)
    noise = rng.standard_normal((20000, 33, 33))
    a = fb33.expand(noise)
    for k in (0, 1, 5):
        S = fb33.noise_blocks[k]
        w, V = np.linalg.eigh(S)
        W = (V / np.sqrt(w)) @ V.conj().T
        X = a[:, fb33.block(k)] @ W.T
        if k == 0:
            C = X.real.T @ X.real / X.shape[0]
        else:
            C = X.T @ X.conj() / X.shape[0]
        # whitened pure noise: identity covariance within sampling error
        assert np.all(np.abs(np.diag(C).real - 1) < 0.05)


def test_even_grid_center_and_mask():
    x, y = pixel_coordinates(10)
    assert x[0, 5] == 0 and y[5, 0] == 0
    m = disk_mask(9)
    assert m[4, 0] and not m[0, 0]
