"""
Steerable PCA over Fourier-Bessel coefficients.

The covariance of a rotation-augmented data set is block diagonal in the
angular frequency k, so PCA runs independently per block.  Only the k = 0
block is centered: under uniform rotations the population mean image is
radially symmetric.

Each block is first whitened by the exact noise covariance of the
least-squares Fourier-Bessel coefficients (``FBBasis.noise_blocks``).  In the
whitened coordinates pixel noise of variance sigma^2 maps to white noise of
variance sigma^2, the eigenvectors are orthonormal, and components are kept when

    lambda^(k) > threshold * sigma^2 * (1 + sqrt(gamma_k))^2,   gamma_k = p_k / N.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .steerable_basis import FBBasis

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1.005


def _hermitian_power(S, power):
    w, V = np.linalg.eigh(S)
    return (V * w**power) @ V.conj().T


@dataclass
class SPCABasis:
    """
    Data-driven steerable eigenbasis.

    ``eigvecs[k]`` is a (p_k, r_k) matrix with orthonormal columns in the
    whitened coordinates of block k; ``eigvals[k]`` holds every eigenvalue of
    that block in descending order.  The reduced coefficient layout is sorted
    by frequency, then by decreasing eigenvalue; ``ks`` gives the frequency of
    each component.
    """

    fb: FBBasis
    mean_coeffs: np.ndarray
    eigvecs: list
    eigvals: list
    counts: np.ndarray
    sigma2: float
    n_samples: int
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.ks = np.repeat(np.arange(len(self.counts)), self.counts)
        self.count = int(self.counts.sum())
        whiten = [_hermitian_power(S, -0.5) for S in self.fb.noise_blocks]
        color = [_hermitian_power(S, 0.5) for S in self.fb.noise_blocks]
        # alpha_k = V^* S^{-1/2} a_k and a_k = S^{1/2} V alpha_k
        self._analysis = [V.conj().T @ W for V, W in zip(self.eigvecs, whiten)]
        self._synthesis = [C @ V for V, C in zip(self.eigvecs, color)]

    @property
    def k_max(self):
        nz = np.flatnonzero(self.counts)
        return int(nz[-1]) if nz.size else 0

    def block(self, k):
        start = int(self.counts[:k].sum())
        return slice(start, start + int(self.counts[k]))

    def thresholds(self):
        """Eigenvalue cutoff per frequency block."""
        p = self.fb.p_k[: len(self.counts)]
        gamma = p / self.n_samples
        return self.threshold * self.sigma2 * (1 + np.sqrt(gamma)) ** 2

    def embed(self, coeffs):
        """Map sPCA coefficients (..., M) to centered Fourier-Bessel coefficients."""
        coeffs = np.asarray(coeffs)
        out = np.zeros(coeffs.shape[:-1] + (self.fb.count,), dtype=complex)
        for k, E in enumerate(self._synthesis):
            if self.counts[k]:
                out[..., self.fb.block(k)] = coeffs[..., self.block(k)] @ E.T
        return out


def fit_spca(coeff_stack, sigma2, fb, threshold=DEFAULT_THRESHOLD):
    """
    Fit a steerable PCA basis.

    :param coeff_stack: (N, fb.count) Fourier-Bessel coefficients of the observations.
    :param sigma2: Pixel-domain noise variance.
    :param fb: The :class:`FBBasis` the coefficients belong to.
    :param threshold: Multiplicative margin on the noise edge (default 1.005).
    """
    A = np.asarray(coeff_stack)
    if A.ndim != 2 or A.shape[1] != fb.count:
        raise ValueError(f"coefficient stack must have shape (N, {fb.count}), got {A.shape}")
    N = A.shape[0]
    if N < 2:
        raise ValueError("need at least two observations")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")

    mean = np.zeros(fb.count, dtype=complex)
    b0 = fb.block(0)
    mean[b0] = A[:, b0].real.mean(axis=0)

    decomps = []
    for k in range(fb.k_max + 1):
        b = fb.block(k)
        W = _hermitian_power(fb.noise_blocks[k], -0.5)
        if k == 0:
            X = (A[:, b].real - mean[b].real) @ W.T
            C = X.T @ X / N
        else:
            X = A[:, b] @ W.T
            C = X.T @ X.conj() / N
        C = (C + C.conj().T) / 2
        w, V = np.linalg.eigh(C)
        decomps.append((w[::-1], V[:, ::-1]))

    # numerical-rank guard so that sigma2 = 0 keeps only genuine directions
    scale = max(float(np.abs(w).max(initial=0)) for w, _ in decomps)
    rank_floor = 100 * np.finfo(float).eps * max(fb.p_k.max(), 1) * scale
    eigvecs, eigvals, counts = [], [], []
    for k, (w, V) in enumerate(decomps):
        gamma = fb.p_k[k] / N
        floor = max(threshold * sigma2 * (1 + np.sqrt(gamma)) ** 2, rank_floor)
        keep = int(np.sum(w > floor))
        eigvals.append(w)
        eigvecs.append(np.ascontiguousarray(V[:, :keep]))
        counts.append(keep)

    counts = np.array(counts)
    logger.info("sPCA kept %d components (k_max=%d)", counts.sum(), np.flatnonzero(counts).max(initial=0))
    return SPCABasis(fb, mean, eigvecs, eigvals, counts, float(sigma2), N, threshold)


def project(coeffs, basis):
    """
    sPCA coefficients of Fourier-Bessel coefficients ``coeffs`` (..., fb.count).

    The k = 0 block is centered first.
    """
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != basis.fb.count:
        raise ValueError(f"expected {basis.fb.count} coefficients, got {coeffs.shape[-1]}")
    out = np.zeros(coeffs.shape[:-1] + (basis.count,), dtype=complex)
    for k, P in enumerate(basis._analysis):
        if not basis.counts[k]:
            continue
        a = coeffs[..., basis.fb.block(k)]
        if k == 0:
            a = a.real - basis.mean_coeffs[basis.fb.block(0)].real
        out[..., basis.block(k)] = a @ P.T
    if basis.counts[0]:
        b0 = basis.block(0)
        out[..., b0] = out[..., b0].real
    return out


def reconstruct_coeffs(coeffs, basis):
    """Fourier-Bessel coefficients Phi a + mean for sPCA coefficients ``coeffs``."""
    return basis.embed(coeffs) + basis.mean_coeffs


def reconstruct_image(coeffs, basis):
    """Image(s) Phi a + I_m from sPCA coefficients."""
    return basis.fb.synthesize(reconstruct_coeffs(coeffs, basis))
