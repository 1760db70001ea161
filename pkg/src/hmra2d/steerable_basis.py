"""Fourier-Bessel steerable basis on the disk of radius c = (L - 1) / 2.

Basis functions are

    u^{k,q}(r, theta) = N_{k,q} J_k(R_{k,q} r / c) exp(i k theta),   r <= c,

with R_{k,q} the q-th positive root of J_k and N_{k,q} = 1 / (c sqrt(pi) |J_{k+1}(R_{k,q})|).
Only k >= 0 is stored; a real image has a_{-k,q} = conj(a_{k,q}).

Coefficient vectors are plain complex numpy arrays whose last axis follows the
basis layout (``basis.ks``, ``basis.qs``): sorted by angular frequency, then by
radial index.

For odd L the pixel grid is invariant under quarter turns, so the Gram matrix of
the sampled basis splits into four blocks by ``k mod 4``.  Expansion and synthesis
work on one representative pixel per quarter-turn orbit, which keeps the
least-squares operators four times smaller than the dense design matrix.
"""

from __future__ import annotations

import hashlib
import logging
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg
import scipy.special

logger = logging.getLogger(__name__)


def bessel_roots(k, upper):
    """
    Positive roots of J_k that do not exceed ``upper``, in increasing order.

    :param k: Nonnegative integer order.
    :param upper: Inclusive upper bound on the roots.
    :return: 1-D float array, possibly empty.
    """
    # Roots of J_k are spaced by slightly more than pi and start above k.
    count = int(max(upper - k, 0) / np.pi) + 3
    roots = scipy.special.jn_zeros(k, count)
    while roots[-1] <= upper:
        count *= 2
        roots = scipy.special.jn_zeros(k, count)
    return roots[roots <= upper]


def pixel_coordinates(L):
    """Cartesian pixel coordinates (x = column - center, y = row - center)."""
    center = (L - 1) / 2 if L % 2 else L / 2
    grid = np.arange(L) - center
    x, y = np.meshgrid(grid, grid, indexing="xy")
    return x, y


def disk_mask(L):
    """Boolean mask of pixels with x^2 + y^2 <= ((L - 1) / 2)^2."""
    x, y = pixel_coordinates(L)
    c = (L - 1) / 2
    return x**2 + y**2 <= c**2 + 1e-9


class FBBasis:
    """
    Fourier-Bessel basis sampled on an L x L pixel grid.

    Admits (k, q) iff R_{k,q} <= 2 pi c * bandlimit and k <= 2c.

    :param L: Image side length. Must be odd unless ``allow_even`` is set.
    :param bandlimit: Radial cutoff in cycles per pixel, 0 < bandlimit <= 0.5.
    :param allow_even: Accept even L; the grid center is then pixel (L/2, L/2)
        and a dense least-squares operator is used.
    """

    def __init__(self, L, bandlimit=0.5, allow_even=False):
        L = int(L)
        if L < 9:
            raise ValueError(f"L must be at least 9, got {L}")
        if L % 2 == 0 and not allow_even:
            raise ValueError(f"L must be odd (got {L}); pass allow_even=True to override")
        if not 0 < bandlimit <= 0.5:
            raise ValueError(f"bandlimit must lie in (0, 0.5], got {bandlimit}")

        self.L = L
        self.c = (L - 1) / 2
        self.bandlimit = float(bandlimit)
        self.cutoff = 2 * np.pi * self.c * self.bandlimit

        ks, qs, roots = [], [], []
        k = 0
        while k <= 2 * self.c:
            r = bessel_roots(k, self.cutoff)
            if r.size == 0:
                break
            ks.append(np.full(r.size, k))
            qs.append(np.arange(1, r.size + 1))
            roots.append(r)
            k += 1
        self.ks = np.concatenate(ks)
        self.qs = np.concatenate(qs)
        self.roots = np.concatenate(roots)
        self.k_max = int(self.ks.max())
        self.p_k = np.bincount(self.ks, minlength=self.k_max + 1)
        self.norms = 1.0 / (self.c * np.sqrt(np.pi) * np.abs(scipy.special.jv(self.ks + 1, self.roots)))
        self.count = self.ks.size

        self.mask = disk_mask(L)
        if L % 2:
            self._build_orbit_operators()
        else:
            self._build_dense_operators()
        logger.debug("FB basis L=%d: %d coefficients, k_max=%d", L, self.count, self.k_max)

    def __repr__(self):
        return f"FBBasis(L={self.L}, bandlimit={self.bandlimit}, count={self.count}, k_max={self.k_max})"

    def block(self, k):
        """Slice of the coefficient layout holding angular frequency ``k``."""
        start = int(self.p_k[:k].sum())
        return slice(start, start + int(self.p_k[k]))

    @cached_property
    def digest(self):
        """Short hash identifying this basis (layout and grid)."""
        h = hashlib.sha256()
        h.update(np.array([self.L, self.count], dtype=np.int64).tobytes())
        h.update(np.float64(self.bandlimit).tobytes())
        h.update(self.roots.tobytes())
        return h.hexdigest()[:16]

    def evaluate_functions(self, x, y):
        """
        Evaluate every k >= 0 basis function at the points (x, y).

        :return: Complex array of shape ``x.shape + (count,)``; zero outside the disk.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r = np.hypot(x, y)
        theta = np.arctan2(y, x)[..., None]
        # Pixel radii repeat a lot (r^2 is an integer), so tabulate J_k once per radius.
        r_unique, inverse = np.unique(np.round(r, 12), return_inverse=True)
        table = self.norms * scipy.special.jv(self.ks, self.roots * r_unique[:, None] / self.c)
        table[r_unique > self.c + 1e-9] = 0
        radial = table[inverse.reshape(r.shape)]
        return radial * np.exp(1j * self.ks * theta)

    @cached_property
    def design_matrix(self):
        """Dense (#disk pixels) x count matrix of sampled basis functions."""
        x, y = pixel_coordinates(self.L)
        return self.evaluate_functions(x[self.mask], y[self.mask])

    # -- operators ---------------------------------------------------------

    def _build_orbit_operators(self):
        L, c = self.L, self.c
        ic = int(c)
        x, y = pixel_coordinates(L)
        reps = self.mask & (x > 0) & (y >= 0)
        rx, ry = x[reps].astype(int), y[reps].astype(int)
        # Orbit members p, Rp, R^2 p, R^3 p with R(x, y) = (-y, x).
        members = [(rx, ry), (-ry, rx), (-rx, -ry), (ry, -rx)]
        self._orbit_index = np.stack([(yy + ic) * L + (xx + ic) for xx, yy in members], axis=1)
        self._center_index = ic * L + ic

        U = self.evaluate_functions(rx.astype(float), ry.astype(float))
        center = self.evaluate_functions(np.zeros(1), np.zeros(1))[0]
        self._U = U
        self._center_values = center

        residue = self.ks % 4
        self._cols = [np.flatnonzero(residue == m) for m in range(4)]
        # Columns of k > 0 whose conjugate (frequency -k) falls in residue class m.
        self._conj_cols = [np.flatnonzero((self.ks > 0) & ((-self.ks) % 4 == m)) for m in range(4)]

        self._W = []
        self._W_center = None
        noise_cov = np.zeros((self.count, self.count), dtype=complex)
        for m in range(4):
            pos, neg = self._cols[m], self._conj_cols[m]
            Um = np.concatenate([U[:, pos], np.conj(U[:, neg])], axis=1)
            G = 4 * (Um.conj().T @ Um)
            rhs = Um.conj().T
            if m == 0:
                cm = np.concatenate([center[pos], np.conj(center[neg])])
                G += np.outer(cm.conj(), cm)
                rhs = np.concatenate([rhs, cm.conj()[:, None]], axis=1)
            Ginv = scipy.linalg.inv(G)
            Ginv = (Ginv + Ginv.conj().T) / 2
            noise_cov[np.ix_(pos, pos)] = Ginv[: pos.size, : pos.size]
            sol = Ginv[: pos.size] @ rhs
            if m == 0:
                self._W_center = sol[:, -1].copy()
                sol = sol[:, :-1]
            self._W.append(np.ascontiguousarray(sol))
        self._set_noise_blocks(noise_cov)

    def _set_noise_blocks(self, cov):
        blocks = []
        for k in range(self.k_max + 1):
            b = self.block(k)
            S = cov[b, b]
            blocks.append(S.real.copy() if k == 0 else S.copy())
        self.noise_blocks = blocks

    def _build_dense_operators(self):
        B = self.design_matrix
        pos = self.ks == 0
        # Real parameterization: k = 0 -> u, k > 0 -> (2 Re u, -2 Im u).
        cols = [B[:, pos].real]
        kp = np.flatnonzero(~pos)
        cols.append(2 * B[:, kp].real)
        cols.append(-2 * B[:, kp].imag)
        A = np.concatenate(cols, axis=1)
        self._dense_pinv = np.linalg.pinv(A)
        self._dense_k0 = np.flatnonzero(pos)
        self._dense_kp = kp
        # Covariance of the complex coefficients under unit white pixel noise.
        P = self._dense_pinv
        n0, npos = self._dense_k0.size, kp.size
        rows = np.zeros((self.count, P.shape[1]), dtype=complex)
        rows[self._dense_k0] = P[:n0]
        rows[kp] = P[n0 : n0 + npos] + 1j * P[n0 + npos :]
        self._set_noise_blocks(rows @ rows.conj().T)

    def expand(self, images):
        """
        Least-squares coefficients of ``images`` (shape (..., L, L)); corners ignored.

        :return: Complex array of shape (..., count).
        """
        images = np.asarray(images, dtype=float)
        if images.shape[-2:] != (self.L, self.L):
            raise ValueError(f"expected images of shape (..., {self.L}, {self.L}), got {images.shape}")
        lead = images.shape[:-2]
        flat = images.reshape(-1, self.L * self.L)
        out = np.zeros((flat.shape[0], self.count), dtype=complex)
        if self.L % 2:
            yo = np.fft.fft(flat[:, self._orbit_index], axis=-1)
            for m in range(4):
                out[:, self._cols[m]] = yo[:, :, m] @ self._W[m].T
            out[:, self._cols[0]] += flat[:, self._center_index, None] * self._W_center
        else:
            sol = flat[:, self.mask.ravel()] @ self._dense_pinv.T
            n0, npos = self._dense_k0.size, self._dense_kp.size
            out[:, self._dense_k0] = sol[:, :n0]
            out[:, self._dense_kp] = sol[:, n0 : n0 + npos] + 1j * sol[:, n0 + npos :]
        out[:, self.ks == 0] = out[:, self.ks == 0].real
        return out.reshape(lead + (self.count,))

    def synthesize(self, coeffs, return_imag=False):
        """
        Real images from coefficients (shape (..., count)); zero outside the disk.

        :param return_imag: Also return the max abs imaginary residue before it is dropped.
        """
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-1] != self.count:
            raise ValueError(f"expected {self.count} coefficients, got {coeffs.shape[-1]}")
        lead = coeffs.shape[:-1]
        A = coeffs.reshape(-1, self.count).astype(complex)
        n = A.shape[0]
        flat = np.zeros((n, self.L * self.L), dtype=complex)
        if self.L % 2:
            z = [A[:, self._cols[m]] @ self._U[:, self._cols[m]].T for m in range(4)]
            zc = [A[:, self._conj_cols[m]] @ self._U[:, self._conj_cols[m]].T for m in range(4)]
            # t_m collects frequency-m terms, including conjugates of frequency -m.
            t = np.stack([z[m] + np.conj(zc[m]) for m in range(4)], axis=-1)
            vals = 4 * np.fft.ifft(t, axis=-1)
            flat[:, self._orbit_index] = vals
            flat[:, self._center_index] = A @ self._center_values
        else:
            B = self.design_matrix
            kp = self.ks > 0
            vals = A[:, ~kp] @ B[:, ~kp].T + 2 * np.real(A[:, kp] @ B[:, kp].T)
            flat[:, self.mask.ravel()] = vals
        imag = float(np.abs(flat.imag).max()) if flat.size else 0.0
        images = flat.real.reshape(lead + (self.L, self.L))
        if return_imag:
            return images, imag
        return images

    def column_norms(self):
        """Pixel-domain norms of the sampled basis functions."""
        if self.L % 2:
            sq = 4 * np.sum(np.abs(self._U) ** 2, axis=0) + np.abs(self._center_values) ** 2
            return np.sqrt(sq)
        return np.linalg.norm(self.design_matrix, axis=0)


@lru_cache(maxsize=4)
def build_basis(L, bandlimit=0.5, allow_even=False):
    """Construct an :class:`FBBasis`; memoized since bases are immutable."""
    return FBBasis(L, bandlimit=bandlimit, allow_even=allow_even)


def expand(image, basis):
    """Least-squares Fourier-Bessel coefficients of one image or a stack."""
    return basis.expand(image)


def synthesize(coeffs, basis):
    """Real image(s) from Fourier-Bessel coefficients."""
    return basis.synthesize(coeffs)


def layout_ks(layout):
    """Angular-frequency array of a layout: an object with ``.ks`` or the array itself."""
    ks = getattr(layout, "ks", layout)
    return np.asarray(ks, dtype=int)


def rotate_coefficients(coeffs, alpha, layout):
    """
    Coefficients of the image rotated counter-clockwise by ``alpha``.

    a_{k,q} -> a_{k,q} exp(-i k alpha).  Works for any steerable layout
    (Fourier-Bessel or sPCA).  ``alpha`` may be a scalar or an array
    broadcasting against the leading axes of ``coeffs``.
    """
    ks = layout_ks(layout)
    alpha = np.asarray(alpha, dtype=float)
    phase = np.exp(-1j * ks * alpha[..., None])
    return np.asarray(coeffs) * phase
