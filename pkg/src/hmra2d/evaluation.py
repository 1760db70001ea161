"""
Rotation- and permutation-invariant error metrics.

All norms are restricted to the support disk.  Distances minimize over a
360-point angular grid followed by golden-section refinement.  Permutations in
reports are 1-based: ``permutation[i] = j`` pairs truth i + 1 with estimate j.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .observation_model import rotate_image
from .steerable_basis import disk_mask, layout_ks, rotate_coefficients

logger = logging.getLogger(__name__)

GRID_SIZE = 360
ANGLE_TOLERANCE = 1e-4
BRUTE_FORCE_MAX_K = 8
_INVPHI = (np.sqrt(5) - 1) / 2


@dataclass
class EvaluationReport:
    """Errors of a K-class estimate; see module docstring for conventions."""

    dist: float
    dist_r: float
    per_class_errors: np.ndarray
    permutation: np.ndarray
    aligning_angles: np.ndarray
    tv_distance: float = np.nan
    spca_error: float = np.nan
    estimation_error: float = np.nan

    def to_dict(self):
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out


def golden_section(f, lo, hi, tol=ANGLE_TOLERANCE):
    """Minimize a unimodal f on [lo, hi] to bracket width ``tol``."""
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _INVPHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INVPHI * (hi - lo)
            fd = f(d)
    x = (lo + hi) / 2
    return x, f(x)


def _minimize_angle(dist2, grid_values, tol=ANGLE_TOLERANCE):
    """Refine the best grid angle of a squared-distance function."""
    n = grid_values.size
    step = 2 * np.pi / n
    j = int(np.argmin(grid_values))
    theta, value = golden_section(dist2, (j - 1) * step, (j + 1) * step, tol)
    if grid_values[j] < value:
        theta, value = j * step, grid_values[j]
    return float(np.mod(theta, 2 * np.pi)), float(np.sqrt(max(value, 0.0)))


def _check_pair(I, J):
    I = np.asarray(I, dtype=float)
    J = np.asarray(J, dtype=float)
    if I.shape != J.shape or I.ndim != 2 or I.shape[0] != I.shape[1]:
        raise ValueError(f"images must be square and of equal size, got {I.shape} and {J.shape}")
    return I, J


def rotational_distance(I, J, grid_size=GRID_SIZE, tol=ANGLE_TOLERANCE):
    """
    min over theta of ||R_theta I - J|| on the disk, with the minimizing theta.

    Rotation is the bilinear :func:`~hmra2d.observation_model.rotate_image`.
    """
    I, J = _check_pair(I, J)
    mask = disk_mask(I.shape[0])
    Jd = J[mask]

    def dist2(theta):
        return float(np.sum((rotate_image(I, theta)[mask] - Jd) ** 2))

    thetas = 2 * np.pi * np.arange(grid_size) / grid_size
    grid = np.array([dist2(t) for t in thetas])
    theta, d = _minimize_angle(dist2, grid, tol)
    return d, theta


def _steerable_parts(a, fb):
    """
    Split synth(a) into sum_j exp(-i f_j theta) V_j restricted to the disk.

    Blocks with all-zero coefficients are skipped.
    """
    a = np.asarray(a, dtype=complex)
    present = [k for k in range(fb.k_max + 1) if np.any(a[fb.block(k)] != 0)]
    if not present:
        return np.zeros(1), np.zeros((1, int(fb.mask.sum())))
    stack = []
    for k in present:
        part = np.zeros(fb.count, dtype=complex)
        part[fb.block(k)] = a[fb.block(k)]
        stack.append(part)
        stack.append(1j * part)
    imgs = fb.synthesize(np.array(stack))[:, fb.mask]
    freqs, vecs = [], []
    for n, k in enumerate(present):
        re, im = imgs[2 * n], imgs[2 * n + 1]
        if k == 0:
            freqs.append(0)
            vecs.append(re.astype(complex))
        else:
            # synth(a_k) = 2 Re D_k and synth(i a_k) = -2 Im D_k
            D = (re - 1j * im) / 2
            freqs += [k, -k]
            vecs += [D, np.conj(D)]
    return np.array(freqs, dtype=float), np.array(vecs)


def coefficient_distance(a, J, fb, grid_size=GRID_SIZE, tol=ANGLE_TOLERANCE):
    """
    Like :func:`rotational_distance`, with the rotation applied exactly to the
    Fourier-Bessel coefficients ``a`` of the first image before synthesis.

    The squared distance is a trigonometric polynomial in theta; it is
    evaluated exactly without resynthesizing per angle.

    :param a: Fourier-Bessel coefficients (fb.count,).
    :param J: Reference image (L, L).
    :param fb: :class:`~hmra2d.steerable_basis.FBBasis`.
    :return: (distance, theta) with R_theta synth(a) closest to J.
    """
    J = np.asarray(J, dtype=float)
    if J.shape != (fb.L, fb.L):
        raise ValueError(f"image must be {fb.L}x{fb.L}, got {J.shape}")
    Jd = J[fb.mask]
    f, V = _steerable_parts(a, fb)
    gram = V @ V.conj().T
    cross = V @ Jd
    j2 = float(Jd @ Jd)

    def dist2_many(thetas):
        E = np.exp(-1j * np.outer(thetas, f))
        norm2 = np.einsum("tj,jl,tl->t", E, gram, E.conj()).real
        return norm2 - 2 * (E @ cross).real + j2

    def dist2(theta):
        return float(dist2_many(np.array([theta]))[0])

    thetas = 2 * np.pi * np.arange(grid_size) / grid_size
    theta, d = _minimize_angle(dist2, dist2_many(thetas), tol)
    return d, theta


def coefficient_alignment(a, b, layout, weights=None, grid_size=GRID_SIZE, tol=ANGLE_TOLERANCE):
    """
    Angle maximizing Re sum_k e^{-ik theta} <a_k, b_k>, i.e. the rotation of
    ``a`` closest to ``b`` in a weighted coefficient norm.

    :param weights: Per-coefficient weights; default counts k > 0 twice,
        matching the norm of a real image in an orthonormal basis.
    :return: (distance, theta).
    """
    ks = layout_ks(layout)
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    w = np.where(ks == 0, 1.0, 2.0) if weights is None else np.asarray(weights, float)

    def dist2(theta):
        return float(np.sum(w * np.abs(rotate_coefficients(a, theta, ks) - b) ** 2))

    thetas = 2 * np.pi * np.arange(grid_size) / grid_size
    rot = a[None] * np.exp(-1j * ks[None] * thetas[:, None])
    grid = np.sum(w * np.abs(rot - b) ** 2, axis=1)
    theta, d = _minimize_angle(dist2, grid, tol)
    return d, theta


def _assign(D2):
    """Permutation minimizing sum_i D2[i, p(i)]; 0-based."""
    K = D2.shape[0]
    if K <= BRUTE_FORCE_MAX_K:
        return brute_force_assignment(D2)
    rows, cols = linear_sum_assignment(D2)
    return cols[np.argsort(rows)]


def brute_force_assignment(D2):
    """Exhaustive search over all permutations (small K only)."""
    K = D2.shape[0]
    perms = np.array(list(itertools.permutations(range(K))))
    costs = D2[np.arange(K), perms].sum(axis=1)
    return perms[int(np.argmin(costs))]


def hungarian_assignment(D2):
    rows, cols = linear_sum_assignment(D2)
    return cols[np.argsort(rows)]


def _report(D, T, truth_norms):
    K = D.shape[0]
    perm = _assign(D**2)
    d_match = D[np.arange(K), perm]
    dist = float(np.sqrt(np.sum(d_match**2)))
    denom = float(np.sqrt(np.sum(truth_norms**2)))
    return EvaluationReport(
        dist=dist,
        dist_r=dist / denom if denom > 0 else np.inf,
        per_class_errors=d_match / np.where(truth_norms > 0, truth_norms, np.inf),
        permutation=perm + 1,
        aligning_angles=T[np.arange(K), perm],
    )


def matched_set_distance(truth, estimates):
    """
    Rotation- and permutation-invariant distance between two image sets.

    :param truth: (K, L, L) images.
    :param estimates: (K, L, L) images.
    :return: :class:`EvaluationReport` with dist, dist_r, per-class relative
        errors, 1-based permutation and aligning angles filled in.
    """
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.shape[0] != estimates.shape[0]:
        raise ValueError(f"K mismatch: {truth.shape[0]} vs {estimates.shape[0]}")
    if truth.shape[1:] != estimates.shape[1:]:
        raise ValueError("image size mismatch")
    K = truth.shape[0]
    D = np.empty((K, K))
    T = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            D[i, j], T[i, j] = rotational_distance(truth[i], estimates[j])
    mask = disk_mask(truth.shape[-1])
    return _report(D, T, np.linalg.norm(truth[:, mask], axis=1))


def matched_coefficient_distance(truth, estimate_coeffs, fb):
    """
    :func:`matched_set_distance` with estimates given as Fourier-Bessel
    coefficients and rotated exactly; angles say how far the truth must
    rotate to meet each estimate.
    """
    truth = np.asarray(truth, dtype=float)
    estimate_coeffs = np.asarray(estimate_coeffs)
    K = truth.shape[0]
    if estimate_coeffs.shape[0] != K:
        raise ValueError(f"K mismatch: {K} vs {estimate_coeffs.shape[0]}")
    D = np.empty((K, K))
    T = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            d, theta = coefficient_distance(estimate_coeffs[j], truth[i], fb)
            D[i, j], T[i, j] = d, np.mod(-theta, 2 * np.pi)
    return _report(D, T, np.linalg.norm(truth[:, fb.mask], axis=1))


def tv_distance(pi_hat, pi, permutation=None):
    """
    1/2 sum_i |pi_hat[p(i)] - pi[i]| with a 1-based permutation p.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if pi_hat.shape != pi.shape or pi.ndim != 1:
        raise ValueError("probability vectors must have equal length")
    for name, v in (("pi_hat", pi_hat), ("pi", pi)):
        if np.any(v < 0) or abs(v.sum() - 1) > 1e-6:
            raise ValueError(f"{name} is not a probability vector")
    perm = np.arange(pi.size) if permutation is None else np.asarray(permutation, dtype=int) - 1
    if sorted(perm.tolist()) != list(range(pi.size)):
        raise ValueError("permutation must be a bijection on 1..K")
    return float(0.5 * np.sum(np.abs(pi_hat[perm] - pi)))


def evaluate_estimate(truth, truth_spca_coeffs, estimate_coeffs, fb, pi=None, pi_hat=None):
    """
    Full report for an estimate expressed in Fourier-Bessel coefficients.

    ``spca_error`` compares the truth with its own sPCA reconstruction,
    ``estimation_error`` compares the estimate with that reconstruction; both
    use exact coefficient-domain rotations.  dist, dist_r, the permutation and
    the angles describe estimate vs truth.

    :param truth: (K, L, L) ground-truth images.
    :param truth_spca_coeffs: (K, fb.count) truth after sPCA projection.
    :param estimate_coeffs: (K, fb.count) estimated classes.
    """
    truth = np.asarray(truth, dtype=float)
    report = matched_coefficient_distance(truth, estimate_coeffs, fb)
    spca = matched_coefficient_distance(truth, truth_spca_coeffs, fb)
    report.spca_error = spca.dist_r
    truth_spca = fb.synthesize(np.asarray(truth_spca_coeffs))
    est = matched_coefficient_distance(truth_spca, estimate_coeffs, fb)
    report.estimation_error = est.dist_r
    if pi is not None and pi_hat is not None:
        report.tv_distance = tv_distance(pi_hat, pi, est.permutation)
    return report
