"""
Weighted least-squares inversion of the mixed invariants.

Unknowns are K coefficient vectors a^i (k >= 0 layout, k = 0 entries real)
and mixing weights pi on the simplex.  The objective is

    F = sum |M - m_hat|^2 + sum |P - p_hat|^2 / (1 + s2) + sum |B - b_hat|^2 / (1 + s2 + s2^2)

where M, P, B are the pi-weighted features of the a^i.  Complex gradients use
the real inner product Re <g, y> = DF[y], so g = dF/dRe(a) + 1j dF/dIm(a).
Mixing weights are parameterized as pi = softmax(z).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .invariants import _features_arrays

logger = logging.getLogger(__name__)

METHODS = {"conjugate-gradient": "CG", "trust-region": "trust-ncg"}


@dataclass
class SolverOptions:
    """
    :param restarts: Independent random starts; the lowest objective wins.
    :param max_iterations: Iteration cap per start.
    :param gradient_tolerance: Stop when the gradient norm of the normalized
        objective drops below this value.
    :param method: ``"conjugate-gradient"`` or ``"trust-region"``.
    :param fix_pi: Known mixing weights, held fixed; None estimates them.
    :param seed: Seed of the initializations.
    :param workers: Threads used to run restarts concurrently.
    """

    restarts: int = 5
    max_iterations: int = 10_000
    gradient_tolerance: float = 1e-8
    method: str = "conjugate-gradient"
    fix_pi: np.ndarray = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.restarts < 1 or self.max_iterations < 1 or self.workers < 1:
            raise ValueError("restarts, max_iterations and workers must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {sorted(METHODS)}, got {self.method!r}")


@dataclass
class MixtureEstimate:
    """Estimated class coefficients (K, M) and mixing weights."""

    coeffs: np.ndarray
    pi_hat: np.ndarray
    objective_value: float = np.nan
    gradient_norm: float = np.nan
    restarts_used: int = 0
    iterations: int = 0
    converged: bool = False
    history: list = field(default_factory=list)

    @property
    def K(self):
        return self.coeffs.shape[0]


def _weights(sigma2):
    return 1.0, 1.0 / (1 + sigma2), 1.0 / (1 + sigma2 + sigma2**2)


def _check(coeffs, pi, target):
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=complex))
    if coeffs.shape[1] != target.index.size:
        raise ValueError(f"layout mismatch: {coeffs.shape[1]} coefficients vs {target.index.size}")
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (coeffs.shape[0],):
        raise ValueError("pi must have one entry per class")
    return coeffs, pi


def _residuals(coeffs, pi, target):
    feats = _features_arrays(coeffs, target.index)
    res = [pi @ f - t for f, t in zip(feats, (target.m, target.p, target.b))]
    return feats, res


def objective(coeffs, pi, target, sigma2):
    """
    Weighted least-squares misfit between the model's mixed moments at
    (coeffs, pi) and ``target``.

    :param coeffs: (K, M) class coefficients; k = 0 imaginary parts are ignored.
    :param pi: Length-K mixing weights.
    :param target: :class:`~hmra2d.invariants.MixedInvariants`.
    :param sigma2: Noise variance used in the weights.
    """
    coeffs, pi = _check(coeffs, pi, target)
    coeffs = _realify(coeffs, target.index)
    _, res = _residuals(coeffs, pi, target)
    return float(sum(w * np.sum(np.abs(r) ** 2) for w, r in zip(_weights(sigma2), res)))


def _realify(coeffs, index):
    out = coeffs.copy()
    out[:, index.mean_idx] = out[:, index.mean_idx].real
    return out


def _scatter(idx, values, size):
    return np.bincount(idx, values.real, size) + 1j * np.bincount(idx, values.imag, size)


def gradient(coeffs, pi, target, sigma2):
    """
    Analytical gradient of :func:`objective`.

    :return: (g_a, g_pi); g_a is (K, M) complex with g = dF/dRe + 1j dF/dIm
        (real on k = 0), g_pi is dF/dpi of length K.
    """
    coeffs, pi = _check(coeffs, pi, target)
    coeffs = _realify(coeffs, target.index)
    return _gradient(coeffs, pi, target, sigma2)[1:]


def _gradient(A, pi, target, sigma2):
    index = target.index
    K, M = A.shape
    w1, w2, w3 = _weights(sigma2)
    feats, (rm, rp, rb) = _residuals(A, pi, target)
    F = w1 * np.sum(rm**2) + w2 * np.sum(np.abs(rp) ** 2) + w3 * np.sum(np.abs(rb) ** 2)

    # dF/dpi_i = 2 Re sum conj(R) f^i per term
    g_pi = 2 * (
        w1 * feats[0] @ rm
        + w2 * (feats[1] @ np.conj(rp)).real
        + w3 * (feats[2] @ np.conj(rb)).real
    )

    i1, i2 = index.pow_i1, index.pow_i2
    j1, j2, j3 = index.bis_i1, index.bis_i2, index.bis_i3
    g_a = np.empty((K, M), dtype=complex)
    for c in range(K):
        a = A[c]
        s = 2 * pi[c]
        g = np.zeros(M, dtype=complex)
        g[index.mean_idx] += s * w1 * rm
        tp = s * w2 * rp
        g += _scatter(i1, tp * a[i2], M)
        g += _scatter(i2, np.conj(tp) * a[i1], M)
        tb = s * w3 * rb
        g += _scatter(j1, tb * np.conj(a[j2]) * a[j3], M)
        g += _scatter(j2, tb * np.conj(a[j1]) * a[j3], M)
        g += _scatter(j3, np.conj(tb) * a[j1] * a[j2], M)
        g[index.mean_idx] = g[index.mean_idx].real
        g_a[c] = g
    return float(F), g_a, g_pi


class _Packing:
    """Real parameter vector <-> (coeffs, pi)."""

    def __init__(self, index, K, fix_pi):
        self.index = index
        self.K = K
        self.fix_pi = None if fix_pi is None else np.asarray(fix_pi, dtype=float)
        self.real_mask = index.ks == 0
        self.n_real = int(self.real_mask.sum())
        self.n_cplx = index.size - self.n_real
        self.per_class = self.n_real + 2 * self.n_cplx
        self.size = K * self.per_class + (0 if fix_pi is not None else K)

    def unpack(self, x):
        K, nr, nc = self.K, self.n_real, self.n_cplx
        body = x[: K * self.per_class].reshape(K, self.per_class)
        A = np.empty((K, self.index.size), dtype=complex)
        A[:, self.real_mask] = body[:, :nr]
        A[:, ~self.real_mask] = body[:, nr : nr + nc] + 1j * body[:, nr + nc :]
        if self.fix_pi is not None:
            return A, self.fix_pi.copy(), None
        z = x[K * self.per_class :]
        e = np.exp(z - z.max())
        return A, e / e.sum(), z

    def pack(self, A, z=None):
        body = np.concatenate(
            [A[:, self.real_mask].real, A[:, ~self.real_mask].real, A[:, ~self.real_mask].imag], axis=1
        )
        parts = [body.ravel()]
        if self.fix_pi is None:
            parts.append(np.zeros(self.K) if z is None else z)
        return np.concatenate(parts)

    def pack_gradient(self, g_a, g_pi, pi):
        parts = [
            np.concatenate(
                [g_a[:, self.real_mask].real, g_a[:, ~self.real_mask].real, g_a[:, ~self.real_mask].imag],
                axis=1,
            ).ravel()
        ]
        if self.fix_pi is None:
            # softmax chain rule
            parts.append(pi * (g_pi - pi @ g_pi))
        return np.concatenate(parts)


def _target_scale(target, sigma2):
    w1, w2, w3 = _weights(sigma2)
    s = w1 * np.sum(target.m**2) + w2 * np.sum(np.abs(target.p) ** 2) + w3 * np.sum(np.abs(target.b) ** 2)
    return float(s) if s > 0 else 1.0


def initial_guess(target, K, rng):
    """
    Complex Gaussian coefficients with per-entry variance max(p_hat_{k,q,q}, 0)
    (real on k = 0); ``target.m`` is not used.
    """
    index = target.index
    diag = index.pow_i1 == index.pow_i2
    var = np.zeros(index.size)
    var[index.pow_i1[diag]] = np.maximum(target.p[diag].real, 0)
    if not np.any(var > 0):
        var[:] = 1.0
    z = rng.standard_normal((K, index.size)) + 1j * rng.standard_normal((K, index.size))
    A = z * np.sqrt(var / 2)
    real = index.ks == 0
    A[:, real] = rng.standard_normal((K, int(real.sum()))) * np.sqrt(var[real])
    return A


def _run_one(target, K, options, sigma2, rng, scale):
    index = target.index
    pack = _Packing(index, K, options.fix_pi)
    x0 = pack.pack(initial_guess(target, K, rng))
    history = []

    def fun(x):
        A, pi, _ = pack.unpack(x)
        F, g_a, g_pi = _gradient(A, pi, target, sigma2)
        return F / scale, pack.pack_gradient(g_a, g_pi, pi) / scale

    def callback(xk, *args):
        history.append(fun(xk)[0])

    kwargs = {}
    method = METHODS[options.method]
    if method == "trust-ncg":

        def hessp(x, v):
            # forward difference of the analytical gradient
            nv = np.linalg.norm(v)
            if nv == 0:
                return np.zeros_like(v)
            eps = np.sqrt(np.finfo(float).eps) * (1 + np.linalg.norm(x)) / nv
            return (fun(x + eps * v)[1] - fun(x)[1]) / eps

        kwargs["hessp"] = hessp
        tol_opts = {"gtol": options.gradient_tolerance}
    else:
        tol_opts = {"gtol": options.gradient_tolerance, "norm": 2}
    res = optimize.minimize(
        fun, x0, jac=True, method=method, callback=callback,
        options={"maxiter": options.max_iterations, **tol_opts},
        **kwargs,
    )
    A, pi, _ = pack.unpack(res.x)
    F, grad = fun(res.x)
    gnorm = float(np.linalg.norm(grad))
    return MixtureEstimate(
        coeffs=A,
        pi_hat=pi,
        objective_value=F * scale,
        gradient_norm=gnorm,
        iterations=int(res.nit),
        converged=gnorm <= options.gradient_tolerance,
        history=history,
    )


def solve(target, K, options=None, sigma2=None):
    """
    Minimize the moment misfit over K classes from several random starts.

    The optimizer works on the objective divided by its value at zero
    coefficients, so ``gradient_tolerance`` is relative to the scale of the
    target; ``objective_value`` is reported unscaled.

    :param target: :class:`~hmra2d.invariants.MixedInvariants`.
    :param K: Number of classes.
    :param options: :class:`SolverOptions`.
    :param sigma2: Noise variance for the weights; defaults to ``target.sigma2``.
    """
    options = options or SolverOptions()
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    if target.index.size == 0:
        raise ValueError("target has no coefficients")
    if options.fix_pi is not None:
        fix = np.asarray(options.fix_pi, dtype=float)
        if fix.shape != (K,) or np.any(fix < 0) or abs(fix.sum() - 1) > 1e-9:
            raise ValueError("fix_pi must be a length-K simplex vector")
        options = replace(options, fix_pi=fix)
    sigma2 = getattr(target, "sigma2", 0.0) if sigma2 is None else sigma2
    scale = _target_scale(target, sigma2)
    seeds = np.random.SeedSequence(options.seed).spawn(options.restarts)
    rngs = [np.random.default_rng(s) for s in seeds]

    def run(r):
        est = _run_one(target, K, options, sigma2, rngs[r], scale)
        logger.info(
            "restart %d: F=%.6g |g|=%.3g iterations=%d", r, est.objective_value, est.gradient_norm, est.iterations
        )
        return est

    if options.workers > 1:
        with ThreadPoolExecutor(options.workers) as ex:
            results = list(ex.map(run, range(options.restarts)))
    else:
        results = [run(r) for r in range(options.restarts)]
    best = min(results, key=lambda e: e.objective_value)
    best.restarts_used = options.restarts
    return best

