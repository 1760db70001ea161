"""Ground-truth phantoms and samples from the model Y = T_s R_xi I_pi + noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .steerable_basis import disk_mask, pixel_coordinates

logger = logging.getLogger(__name__)


def _check_side(L, allow_even=False, minimum=9):
    if int(L) != L or L < minimum:
        raise ValueError(f"L must be an integer >= {minimum}, got {L}")
    if L % 2 == 0 and not allow_even:
        raise ValueError(f"L must be odd (got {L}); pass allow_even=True to override")


@dataclass(frozen=True)
class MixtureSpec:
    """Class count, mixing probabilities, per-pixel noise std and shift radius."""

    K: int
    pi: np.ndarray
    sigma: float
    shift_radius: float = 0.0

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if self.K < 1:
            raise ValueError("K must be positive")
        if pi.shape != (self.K,):
            raise ValueError(f"pi must have length K={self.K}, got shape {pi.shape}")
        if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValueError("pi must be strictly positive and sum to 1")
        if self.sigma < 0 or self.shift_radius < 0:
            raise ValueError("sigma and shift_radius must be nonnegative")
        object.__setattr__(self, "pi", pi)


@dataclass
class ObservationSet:
    """
    Observed images plus the hidden labels and angles.

    ``true_labels`` (1-based) and ``true_angles`` exist for evaluation only;
    estimators take ``observations`` alone.
    """

    observations: np.ndarray
    true_labels: np.ndarray
    true_angles: np.ndarray
    seed: int
    true_shifts: np.ndarray = field(default=None)

    @property
    def N(self):
        return self.observations.shape[0]

    @property
    def L(self):
        return self.observations.shape[-1]


def generate_phantoms(K, L, seed, n_blobs=25, widths=(0.03, 0.08), allow_even=False):
    """
    K smooth phantoms: sums of random Gaussian blobs, masked to the disk and
    scaled to [0, 1].

    :param K: Number of images.
    :param L: Side length (odd, >= 9).
    :param seed: RNG seed; output is a deterministic function of (K, L, seed).
    :param n_blobs: Blobs per image.
    :param widths: Range of blob standard deviations, as fractions of the disk radius.
    :return: Array of shape (K, L, L).
    """
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    _check_side(L, allow_even)
    rng = np.random.default_rng(seed)
    c = (L - 1) / 2
    x, y = pixel_coordinates(L)
    mask = disk_mask(L)
    images = np.empty((K, L, L))
    for i in range(K):
        img = np.zeros((L, L))
        # Blob centers stay well inside the disk so the masked edge is nearly flat.
        radius = 0.55 * c * np.sqrt(rng.uniform(size=n_blobs))
        angle = rng.uniform(0, 2 * np.pi, size=n_blobs)
        width = c * rng.uniform(*widths, size=n_blobs)
        weight = rng.uniform(0.3, 1.0, size=n_blobs)
        for r0, t0, w, a in zip(radius, angle, width, weight):
            x0, y0 = r0 * np.cos(t0), r0 * np.sin(t0)
            img += a * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * w**2))
        img -= img[mask].min()
        img /= img[mask].max()
        img[~mask] = 0
        images[i] = img
    return images


def rotate_image(image, theta):
    """
    Rotate counter-clockwise by ``theta`` about the grid center (bilinear).

    Pixels that sample outside the grid are 0.  Exact quarter turns are
    index permutations.
    """
    theta = float(theta)
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    image = np.asarray(image, dtype=float)
    L = image.shape[-1]
    quarter = theta / (np.pi / 2)
    if image.shape[-2] == L and L % 2 and abs(quarter - round(quarter)) < 1e-12:
        # (x, y) -> (-y, x) with x = column, y = row is rot90 with k=-1 on the array.
        return np.rot90(image, k=-int(round(quarter)) % 4, axes=(-2, -1)).copy()
    return _rotate_bilinear(image, theta)


def _rotate_bilinear(image, theta):
    L = image.shape[-1]
    center = (L - 1) / 2 if L % 2 else L / 2
    x, y = pixel_coordinates(L)
    cos, sin = np.cos(theta), np.sin(theta)
    # out(p) = in(R_{-theta} p)
    xs = cos * x + sin * y
    ys = -sin * x + cos * y
    coords = np.stack([ys + center, xs + center])
    return ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)


def shift_image(image, dx, dy):
    """Integer-pixel translation by (dx, dy) with zero fill."""
    out = np.zeros_like(image)
    L = image.shape[-1]
    dx, dy = int(dx), int(dy)
    src_x = slice(max(0, -dx), min(L, L - dx))
    dst_x = slice(max(0, dx), min(L, L + dx))
    src_y = slice(max(0, -dy), min(L, L - dy))
    dst_y = slice(max(0, dy), min(L, L + dy))
    out[..., dst_y, dst_x] = image[..., src_y, src_x]
    return out


def _integer_shifts_in_disk(radius):
    r = int(np.floor(radius))
    g = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(g, g, indexing="xy")
    keep = dx**2 + dy**2 <= radius**2 + 1e-9
    return np.stack([dx[keep], dy[keep]], axis=1)


def _observation_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_one(images, spec, seed, index):
    """
    Draw observation ``index`` of the stream identified by ``seed``.

    Each observation has its own RNG stream, so any subset of indices can be
    generated independently and in any order.

    :return: (image, label in 1..K, angle, (dx, dy))
    """
    rng = _observation_rng(seed, index)
    label = int(rng.choice(spec.K, p=spec.pi))
    angle = float(rng.uniform(0, 2 * np.pi))
    shift = (0, 0)
    if spec.shift_radius > 0:
        table = _integer_shifts_in_disk(spec.shift_radius)
        shift = tuple(int(v) for v in table[rng.integers(table.shape[0])])
    L = images.shape[-1]
    noise = rng.standard_normal((L, L)) * spec.sigma
    img = rotate_image(images[label], angle)
    if shift != (0, 0):
        img = shift_image(img, *shift)
    return img + noise, label + 1, angle, shift


def sample_observations(images, spec, N, seed, start=0, dtype=np.float64):
    """
    Draw N i.i.d. observations Y_i = T_{s_i} R_{xi_i} I_{pi_i} + eps_i.

    :param images: Array (K, L, L) of class images.
    :param spec: :class:`MixtureSpec`.
    :param N: Number of observations.
    :param seed: Stream seed.
    :param start: Index of the first observation; ``start`` and ``N`` select a
        contiguous chunk of the stream.
    :param dtype: Storage dtype of the returned images.
    """
    images = np.asarray(images, dtype=float)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"images must have shape (K, L, L), got {images.shape}")
    if images.shape[0] != spec.K:
        raise ValueError(f"got {images.shape[0]} images for K={spec.K}")
    if N < 1:
        raise ValueError("N must be positive")
    L = images.shape[-1]
    obs = np.empty((N, L, L), dtype=dtype)
    labels = np.empty(N, dtype=int)
    angles = np.empty(N)
    shifts = np.empty((N, 2), dtype=int)
    for j in range(N):
        obs[j], labels[j], angles[j], shifts[j] = sample_one(images, spec, seed, start + j)
    return ObservationSet(obs, labels, angles, int(seed), shifts)


def estimate_noise_variance(observations):
    """
    Pooled sample variance of the pixels outside the support disk.

    :param observations: :class:`ObservationSet` or array (N, L, L).
    """
    obs = observations.observations if isinstance(observations, ObservationSet) else observations
    obs = np.asarray(obs)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.shape[0] < 1:
        raise ValueError("need at least one observation")
    outside = ~disk_mask(obs.shape[-1])
    if outside.sum() < 1:
        raise ValueError("image too small: no pixels outside the disk")
    values = obs[:, outside].astype(np.float64).ravel()
    if values.size < 2:
        raise ValueError("image too small: not enough corner pixels")
    return float(np.var(values, ddof=1))


def snr(images, sigma):
    """SNR = sum_k ||I_k||_F^2 / (K L^2 sigma^2); infinite when sigma == 0."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    K, L = images.shape[0], images.shape[-1]
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return float("inf")
    return float(np.sum(images**2) / (K * L**2 * sigma**2))


def sigma_for_snr(images, target_snr):
    """Noise std that gives ``target_snr`` for these images."""
    images = np.asarray(images, dtype=float)
    K, L = images.shape[0], images.shape[-1]
    return float(np.sqrt(np.sum(images**2) / (K * L**2 * target_snr)))
