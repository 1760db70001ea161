"""
Rotation-invariant features of steerable coefficients and their bias-corrected
empirical estimates.

For coefficients a_{k,q} (k >= 0):

    mean            m_q                 = a_{0,q}
    power spectrum  p_{k,q1,q2}         = a_{k,q1} conj(a_{k,q2})
    bispectrum      b_{k1,k2,q1,q2,q3}  = a_{k1,q1} a_{k2,q2} conj(a_{k1+k2,q3})

The bispectrum is stored for 0 <= k1 <= k2 and 1 <= k1 + k2 <= k_max over all
radial triples; other frequency pairs are conjugates or permutations of these.
Features are flat arrays indexed by an :class:`InvariantIndex`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .steerable_basis import layout_ks


class InvariantIndex:
    """
    Index tables of the moment terms for one coefficient layout.

    :param layout: Object with a ``ks`` attribute (or the array itself) giving
        the angular frequency of each coefficient; coefficients of equal
        frequency must be contiguous and sorted by frequency.
    """

    def __init__(self, layout):
        ks = layout_ks(layout)
        if ks.size and np.any(np.diff(ks) < 0):
            raise ValueError("layout must be sorted by angular frequency")
        self.ks = ks
        self.size = ks.size
        self.k_max = int(ks.max()) if ks.size else 0
        counts = np.bincount(ks, minlength=self.k_max + 1) if ks.size else np.zeros(1, int)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts
        self._starts = starts

        self.mean_idx = np.arange(counts[0])

        p1, p2, pk = [], [], []
        for k in range(self.k_max + 1):
            r = np.arange(counts[k]) + starts[k]
            i1, i2 = np.meshgrid(r, r, indexing="ij")
            p1.append(i1.ravel())
            p2.append(i2.ravel())
            pk.append(np.full(i1.size, k))
        self.pow_i1 = np.concatenate(p1).astype(np.intp)
        self.pow_i2 = np.concatenate(p2).astype(np.intp)
        self.pow_k = np.concatenate(pk).astype(np.intp)

        b1, b2, b3, bk1, bk2 = [], [], [], [], []
        for k1 in range(self.k_max + 1):
            for k2 in range(k1, self.k_max + 1 - k1):
                k3 = k1 + k2
                if k3 < 1 or not (counts[k1] and counts[k2] and counts[k3]):
                    continue
                r1 = np.arange(counts[k1]) + starts[k1]
                r2 = np.arange(counts[k2]) + starts[k2]
                r3 = np.arange(counts[k3]) + starts[k3]
                i1, i2, i3 = np.meshgrid(r1, r2, r3, indexing="ij")
                b1.append(i1.ravel())
                b2.append(i2.ravel())
                b3.append(i3.ravel())
                bk1.append(np.full(i1.size, k1))
                bk2.append(np.full(i1.size, k2))
        empty = np.zeros(0, dtype=np.intp)
        self.bis_i1 = np.concatenate(b1).astype(np.intp) if b1 else empty
        self.bis_i2 = np.concatenate(b2).astype(np.intp) if b2 else empty
        self.bis_i3 = np.concatenate(b3).astype(np.intp) if b3 else empty
        self.bis_k1 = np.concatenate(bk1).astype(np.intp) if bk1 else empty
        self.bis_k2 = np.concatenate(bk2).astype(np.intp) if bk2 else empty

    def __repr__(self):
        return (
            f"InvariantIndex(size={self.size}, k_max={self.k_max}, "
            f"terms=({self.mean_idx.size}, {self.pow_i1.size}, {self.bis_i1.size}))"
        )

    def position(self, k, q):
        """Flat position of component q (1-based) at frequency k."""
        if not 1 <= q <= self.counts[k]:
            raise IndexError(f"no component q={q} at k={k}")
        return int(self._starts[k] + q - 1)

    @cached_property
    def _bis_lookup(self):
        return {(int(a), int(b), int(c)): t for t, (a, b, c) in enumerate(zip(self.bis_i1, self.bis_i2, self.bis_i3))}

    def power_term(self, k, q1, q2):
        """Flat position of p_{k,q1,q2} in the power-spectrum array."""
        r = self.counts[k]
        offset = int(np.sum(self.counts[:k] ** 2))
        return offset + (q1 - 1) * r + (q2 - 1)

    def bispectrum_term(self, k1, k2, q1, q2, q3):
        """Flat position of b_{k1,k2,q1,q2,q3}; requires k1 <= k2."""
        key = (self.position(k1, q1), self.position(k2, q2), self.position(k1 + k2, q3))
        return self._bis_lookup[key]

    @cached_property
    def bias_terms(self):
        """
        Noise-bias pattern of the bispectrum, as (term, mean index) pairs.

        E b - b = sigma^2 * (d_{q2,q3} d_{k1,0} a_{0,q1} + d_{q1,q3} d_{k2,0} a_{0,q2}
        + d_{q1,q2} d_{k1+k2,0} a_{0,q3}); only the first pattern occurs in the
        stored index set, the others are kept for completeness.
        """
        k1, k2 = self.bis_k1, self.bis_k2
        terms, means = [], []
        sel = np.flatnonzero((k1 == 0) & (self.bis_i2 == self.bis_i3))
        terms.append(sel)
        means.append(self.bis_i1[sel])
        sel = np.flatnonzero((k2 == 0) & (self.bis_i1 == self.bis_i3))
        terms.append(sel)
        means.append(self.bis_i2[sel])
        sel = np.flatnonzero((k1 + k2 == 0) & (self.bis_i1 == self.bis_i2))
        terms.append(sel)
        means.append(self.bis_i3[sel])
        return np.concatenate(terms), np.concatenate(means)


@dataclass
class InvariantFeatures:
    """Mean, power spectrum and bispectrum arrays laid out by ``index``."""

    m: np.ndarray
    p: np.ndarray
    b: np.ndarray
    index: InvariantIndex

    def power_block(self, k):
        """The (r_k, r_k) Hermitian power-spectrum matrix at frequency k."""
        r = self.index.counts[k]
        start = self.index.power_term(k, 1, 1)
        return self.p[..., start : start + r * r].reshape(self.p.shape[:-1] + (r, r))

    def as_dict(self):
        return {"m": self.m, "p": self.p, "b": self.b}

    def max_abs_diff(self, other):
        return max(
            float(np.max(np.abs(self.m - other.m), initial=0)),
            float(np.max(np.abs(self.p - other.p), initial=0)),
            float(np.max(np.abs(self.b - other.b), initial=0)),
        )


@dataclass
class MixedInvariants(InvariantFeatures):
    """Bias-corrected estimates of the pi-weighted class invariants."""

    n_samples: int = 0
    sigma2: float = 0.0
    term_counts: tuple = field(default=(0, 0, 0))


def _index_for(layout):
    return layout if isinstance(layout, InvariantIndex) else InvariantIndex(layout)


def _features_arrays(a, index):
    m = a[..., index.mean_idx].real
    p = a[..., index.pow_i1] * np.conj(a[..., index.pow_i2])
    diag = index.pow_i1 == index.pow_i2
    p[..., diag] = np.abs(a[..., index.pow_i1[diag]]) ** 2
    b = a[..., index.bis_i1] * a[..., index.bis_i2] * np.conj(a[..., index.bis_i3])
    return m, p, b


def features_of(a, layout):
    """
    Invariant features of one coefficient vector (or of each row of a stack).

    :param a: Complex array (..., M).
    :param layout: :class:`InvariantIndex` or anything with ``ks``.
    """
    index = _index_for(layout)
    a = np.asarray(a, dtype=complex)
    if a.shape[-1] != index.size:
        raise ValueError(f"expected {index.size} coefficients, got {a.shape[-1]}")
    return InvariantFeatures(*_features_arrays(a, index), index)


class _KahanSum:
    """Compensated running sum of arrays."""

    def __init__(self, shape, dtype):
        self.total = np.zeros(shape, dtype=dtype)
        self._comp = np.zeros(shape, dtype=dtype)

    def add(self, value):
        y = value - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


def estimate_mixed_invariants(stack, sigma2, layout, chunk_size=2048):
    """
    Single-pass, bias-corrected estimates of the mixed invariants.

        m_hat = mean(m^Y)
        p_hat = mean(p^Y) - sigma^2 delta_{q1,q2}
        b_hat = mean(b^Y) - sigma^2 A(m_hat)

    :param stack: (N, M) sPCA coefficients of the observations; may also be any
        iterable of (n_i, M) chunks.
    :param sigma2: Noise variance in the coefficient domain.
    :param layout: :class:`InvariantIndex` or object with ``ks``.
    """
    index = _index_for(layout)
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    if isinstance(stack, np.ndarray):
        if stack.ndim != 2 or stack.shape[1] != index.size:
            raise ValueError(f"stack must have shape (N, {index.size}), got {stack.shape}")
        chunks = (stack[s : s + chunk_size] for s in range(0, stack.shape[0], chunk_size))
    else:
        chunks = iter(stack)

    sums = [
        _KahanSum(index.mean_idx.size, float),
        _KahanSum(index.pow_i1.size, complex),
        _KahanSum(index.bis_i1.size, complex),
    ]
    N = 0
    for chunk in chunks:
        chunk = np.asarray(chunk, dtype=complex)
        if chunk.shape[0] == 0:
            continue
        for acc, arr in zip(sums, _features_arrays(chunk, index)):
            acc.add(arr.sum(axis=0))
        N += chunk.shape[0]
    if N == 0:
        raise ValueError("need at least one observation")

    m = sums[0].total / N
    p = sums[1].total / N
    b = sums[2].total / N
    p = p - sigma2 * (index.pow_i1 == index.pow_i2)
    terms, means = index.bias_terms
    bias = np.zeros_like(b)
    np.add.at(bias, terms, m[means])
    b = b - sigma2 * bias
    return MixedInvariants(
        m, p, b, index, n_samples=N, sigma2=float(sigma2), term_counts=(m.size, p.size, b.size)
    )


def mixed_features(class_coeffs, weights, layout):
    """Exact mixed invariants sum_i w_i features(a^i)."""
    index = _index_for(layout)
    f = features_of(np.asarray(class_coeffs), index)
    w = np.asarray(weights, dtype=float)
    return MixedInvariants(
        w @ f.m, w @ f.p, w @ f.b, index, n_samples=0, sigma2=0.0,
        term_counts=(index.mean_idx.size, index.pow_i1.size, index.bis_i1.size),
    )


def invert_features(features):
    """
    Recover coefficients, up to a global rotation, from the exact features of a
    single coefficient vector (phase unwrapping along the bispectrum).

    Magnitudes come from the power-spectrum diagonal, phases within a frequency
    from the off-diagonal entries, and the phase of frequency k from
    b_{1,k-1,.,.,.}.  The rotation is fixed by giving the strongest k = 1
    coefficient zero phase.  Requires every frequency 1..k_max to carry a
    nonzero coefficient.
    """
    index = features.index
    a = np.zeros(index.size, dtype=complex)
    a[index.mean_idx] = features.m
    ref = {}
    for k in range(1, index.k_max + 1):
        if not index.counts[k]:
            raise ValueError(f"frequency {k} has no components")
        P = features.power_block(k)
        diag = np.real(np.diag(P))
        q = int(np.argmax(diag))
        if diag[q] <= 0:
            raise ValueError(f"frequency {k} is identically zero")
        ref[k] = q
        sl = slice(index.position(k, 1), index.position(k, 1) + index.counts[k])
        # a_{k,q} conj(a_{k,q*}) / |a_{k,q*}| = a_{k,q} e^{-i phi_k}
        a[sl] = P[:, q] / np.sqrt(diag[q])
    for k in range(2, index.k_max + 1):
        t = index.bispectrum_term(1, k - 1, ref[1] + 1, ref[k - 1] + 1, ref[k] + 1)
        a1 = a[index.position(1, ref[1] + 1)]
        ak = a[index.position(k - 1, ref[k - 1] + 1)]
        # b = a1 a_{k-1} conj(a_k)  ->  a_k = conj(b) a1 a_{k-1} / |.|
        target = np.conj(features.b[t]) * a1 * ak
        sl = slice(index.position(k, 1), index.position(k, 1) + index.counts[k])
        phase = target / np.abs(target)
        a[sl] *= phase
    return a


def rotation_phases(a, a_prime, layout):
    """
    theta_k with a'_{k,q} = a_{k,q} exp(-i theta_k), per frequency k >= 1.

    Uses the dominant coefficient pairing sum_q a'_{k,q} conj(a_{k,q}).
    """
    index = _index_for(layout)
    thetas = np.zeros(index.k_max + 1)
    for k in range(1, index.k_max + 1):
        sl = slice(index.position(k, 1), index.position(k, 1) + index.counts[k])
        thetas[k] = np.mod(-np.angle(np.sum(a_prime[sl] * np.conj(a[sl]))), 2 * np.pi)
    return thetas
