"""
Expectation-maximization over sPCA coefficients with R discrete rotations.

The likelihood of observation y given class j and rotation phi_r = 2 pi r / R
is isotropic Gaussian with variance sigma^2 in the coefficient domain.  Only
k >= 0 coefficients are stored, so the squared norm of a real image is
|d_0|^2 + 2 sum_{k>0} |d_k|^2.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .steerable_basis import layout_ks

logger = logging.getLogger(__name__)


@dataclass
class EMOptions:
    """
    :param K: Number of classes.
    :param R: Number of rotation angles 2 pi r / R.
    :param sigma2: Noise variance.
    :param max_iterations: Iteration cap.
    :param tolerance: Stop when the log-likelihood gain per observation
        falls below this value.
    :param seed: Seed for choosing the initial observations.
    :param fix_weights: Known mixing weights held fixed; None estimates them.
    :param restarts: Independent initializations; the highest final
        log-likelihood wins.
    """

    K: int
    R: int
    sigma2: float
    max_iterations: int = 200
    tolerance: float = 1e-8
    seed: int = 0
    fix_weights: np.ndarray = None
    restarts: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.R < 1:
            raise ValueError("R must be positive")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be positive")
        if self.max_iterations < 1 or self.tolerance < 0:
            raise ValueError("invalid stopping rule")

    @property
    def angles(self):
        return 2 * np.pi * np.arange(self.R) / self.R


@dataclass
class EMResult:
    coeffs: np.ndarray
    weights: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    log_likelihood: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    iteration_times: list = field(default_factory=list)


def _norm_weights(ks):
    return np.where(ks == 0, 1.0, 2.0)


def _log_posterior(Y, coeffs, weights, sigma2, angles, ks):
    """Unnormalized log p(class j, rotation r, y_i), shape (N, K, R)."""
    w = _norm_weights(ks)
    Yw = Y * w
    y2 = np.sum(w * np.abs(Y) ** 2, axis=1)
    c2 = np.sum(w * np.abs(coeffs) ** 2, axis=1)
    N, K, R = Y.shape[0], coeffs.shape[0], angles.size
    out = np.empty((N, K, R))
    log_w = np.log(np.maximum(weights, 1e-300)) - np.log(R)
    for r, phi in enumerate(angles):
        C = coeffs * np.exp(-1j * ks * phi)
        cross = (Yw @ C.conj().T).real
        out[:, :, r] = log_w - (y2[:, None] + c2[None] - 2 * cross) / (2 * sigma2)
    return out


def responsibilities(Y, coeffs, weights, sigma2, R, layout):
    """
    Posterior over (class, rotation) per observation.

    :return: (gamma of shape (N, K, R), log-likelihood up to a constant)
    """
    ks = layout_ks(layout)
    angles = 2 * np.pi * np.arange(R) / R
    lp = _log_posterior(np.asarray(Y), np.asarray(coeffs), np.asarray(weights), sigma2, angles, ks)
    norm = logsumexp(lp, axis=(1, 2))
    return np.exp(lp - norm[:, None, None]), float(norm.sum())


def _m_step(Y, gamma, angles, ks):
    K = gamma.shape[1]
    num = np.zeros((K, Y.shape[1]), dtype=complex)
    for r, phi in enumerate(angles):
        # rotate y back by phi: y e^{+ik phi}
        num += (gamma[:, :, r].T @ Y) * np.exp(1j * ks * phi)
    mass = gamma.sum(axis=(0, 2))
    return num / np.maximum(mass, 1e-300)[:, None], mass


def em_classify(stack, options, layout):
    """
    Vanilla EM for K rotated classes.

    :param stack: (N, M) sPCA coefficients.
    :param options: :class:`EMOptions`.
    :param layout: Object with ``ks`` (e.g. the sPCA basis) or the ks array.
    """
    Y = np.asarray(stack, dtype=complex)
    ks = layout_ks(layout)
    N = Y.shape[0]
    K = options.K
    if Y.ndim != 2 or Y.shape[1] != ks.size:
        raise ValueError(f"stack must have shape (N, {ks.size})")
    if N < K:
        raise ValueError(f"need N >= K observations, got N={N}, K={K}")
    if options.fix_weights is not None and np.shape(options.fix_weights) != (K,):
        raise ValueError("fix_weights must have length K")
    start = time.perf_counter()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(options.seed).spawn(options.restarts)]
    runs = [_em_run(Y, options, ks, rng) for rng in rngs]
    best = max(runs, key=lambda r: r.log_likelihood[-1])
    best.wall_time = time.perf_counter() - start
    logger.info("EM R=%d: %d iterations, %.2f s", options.R, best.iterations, best.wall_time)
    return best


def _em_run(Y, options, ks, rng):
    N, K = Y.shape[0], options.K
    coeffs = Y[rng.choice(N, size=K, replace=False)].copy()
    if options.fix_weights is not None:
        weights = np.asarray(options.fix_weights, dtype=float)
    else:
        weights = np.full(K, 1.0 / K)
    angles = options.angles

    trace, times = [], []
    start = time.perf_counter()
    for _ in range(options.max_iterations):
        t0 = time.perf_counter()
        lp = _log_posterior(Y, coeffs, weights, options.sigma2, angles, ks)
        norm = logsumexp(lp, axis=(1, 2))
        trace.append(float(norm.sum()))
        gamma = np.exp(lp - norm[:, None, None])
        coeffs, mass = _m_step(Y, gamma, angles, ks)
        if options.fix_weights is None:
            weights = mass / N
        times.append(time.perf_counter() - t0)
        if len(trace) > 1 and trace[-1] - trace[-2] < options.tolerance * N:
            break
    else:
        logger.info("EM hit the iteration cap (%d)", options.max_iterations)

    lp = _log_posterior(Y, coeffs, weights, options.sigma2, angles, ks)
    norm = logsumexp(lp, axis=(1, 2))
    trace.append(float(norm.sum()))
    post = np.exp(lp - norm[:, None, None]).sum(axis=2)
    wall = time.perf_counter() - start
    return EMResult(
        coeffs=coeffs,
        weights=weights,
        labels=post.argmax(axis=1) + 1,
        confidence=post.max(axis=1),
        log_likelihood=trace,
        iterations=len(times),
        wall_time=wall,
        iteration_times=times,
    )
