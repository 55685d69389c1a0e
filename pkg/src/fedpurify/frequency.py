"""Frequency-domain image analysis: DCT band partitioning and trigger-sensitive noise.

The 2-D orthonormal DCT places low frequencies at the top-left of the
coefficient grid and high frequencies at the bottom-right. Bands are cut
orthogonally to the main diagonal at dyadic fractions of its length; the band
whose coefficients move the most under a trigger (largest MSE between clean
and triggered spectra) is the one that gets Gaussian noise during server-side
augmentation, so the noise mimics trigger energy while leaving the rest of
the spectrum untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn


def dct2(image: np.ndarray) -> np.ndarray:
    """Orthonormal type-II DCT over the last two axes (per channel)."""
    return dctn(np.asarray(image, dtype=np.float64), axes=(-2, -1), norm="ortho")


def idct2(grid: np.ndarray) -> np.ndarray:
    """Inverse of `dct2`; round-trips to within 1e-6."""
    return idctn(np.asarray(grid, dtype=np.float64), axes=(-2, -1), norm="ortho")


def band_partition(grid_shape: tuple[int, int], n_bands: int) -> np.ndarray:
    """Cut the coefficient grid into frequency bands along the anti-diagonal.

    Division points sit at fractions 1/2**(K-k) of the diagonal length for
    k = 1..K, so bands are narrow at low frequencies and wide at high ones.
    A cell (u, v) is assigned by its normalized anti-diagonal coordinate
    (u + v) / (H - 1 + W - 1); cell (0, 0) always lands in band 0 and the
    bottom-right cell in band K-1.

    Returns:
        Boolean mask array of shape (K, H, W) forming an exact partition.

    Raises:
        ValueError: if K < 2 or some band would contain no cells.
    """
    if n_bands < 2:
        raise ValueError("need at least two bands")
    height, width = grid_shape
    if height < 2 or width < 2:
        raise ValueError("grid too small to band-partition")
    diag = float(height - 1 + width - 1)
    cuts = [1.0 / (2 ** (n_bands - k)) for k in range(1, n_bands + 1)]

    u, v = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coord = (u + v) / diag
    masks = np.zeros((n_bands, height, width), dtype=bool)
    lower = -1.0
    for k, upper in enumerate(cuts):
        masks[k] = (coord > lower) & (coord <= upper)
        lower = upper
    empties = [k for k in range(n_bands) if not masks[k].any()]
    if empties:
        raise ValueError(
            f"{n_bands} bands leave band(s) {empties} empty on a {height}x{width} grid; "
            "reduce the band count"
        )
    return masks


@dataclass
class BandProfile:
    """Band masks plus per-band trigger sensitivity for one image shape.

    ``high_band`` is the 0-based index of the most sensitive band (ties break
    toward the higher-frequency band; with no signal it defaults to the last).
    """

    masks: np.ndarray
    mse: np.ndarray
    high_band: int

    def __post_init__(self):
        self.mse = np.asarray(self.mse, dtype=np.float64)
        if (self.mse < 0).any():
            raise ValueError("band MSE values must be non-negative")
        total = self.masks.sum(axis=0)
        if not (total == 1).all():
            raise ValueError("band masks must form an exact partition")

    @property
    def n_bands(self) -> int:
        return self.masks.shape[0]

    @property
    def high_mask(self) -> np.ndarray:
        return self.masks[self.high_band]


def _band_mse(clean: np.ndarray, modified: np.ndarray, masks: np.ndarray) -> np.ndarray:
    diff = dct2(modified) - dct2(clean)
    sq = diff ** 2
    # Collapse any leading channel axis; MSE per band over all its cells.
    if sq.ndim == 3:
        sq = sq.mean(axis=0)
    return np.array([sq[m].mean() for m in masks])


def _argmax_high(mse: np.ndarray) -> int:
    # argmax with ties resolved toward the higher-frequency band
    best = mse.size - 1 - int(np.argmax(mse[::-1]))
    return best


def band_sensitivity(clean: np.ndarray, triggered: np.ndarray, n_bands: int) -> BandProfile:
    """Per-band MSE between clean and triggered spectra of a single image."""
    clean = np.asarray(clean, dtype=np.float64)
    triggered = np.asarray(triggered, dtype=np.float64)
    if clean.shape != triggered.shape:
        raise ValueError("clean/triggered shapes differ")
    masks = band_partition(clean.shape[-2:], n_bands)
    mse = _band_mse(clean, triggered, masks)
    return BandProfile(masks=masks, mse=mse, high_band=_argmax_high(mse))


def estimate_band_profile(images: np.ndarray, trigger_fn, n_bands: int) -> BandProfile:
    """Average per-band sensitivity over a probe set before picking the high band.

    Single-image profiles are noisy; averaging across the probe images (the
    caller supplies at least a few dozen) stabilizes the selected band.
    ``trigger_fn`` maps one image to its triggered counterpart.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError("expected (N, C, H, W) probe images")
    if images.shape[0] == 0:
        raise ValueError("empty probe set")
    masks = band_partition(images.shape[-2:], n_bands)
    acc = np.zeros(n_bands)
    for img in images:
        acc += _band_mse(img, trigger_fn(img), masks)
    mse = acc / images.shape[0]
    return BandProfile(masks=masks, mse=mse, high_band=_argmax_high(mse))


def band_confined_noise(grid: np.ndarray, profile: BandProfile, sigma_scale: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Gaussian coefficient noise that is exactly zero outside the high band.

    The noise std is ``sigma_scale`` times the std of the grid's own
    high-band coefficients (channels pooled).
    """
    mask = profile.high_mask
    band_values = grid[..., mask]
    sigma = sigma_scale * float(band_values.std())
    noise = np.zeros_like(grid)
    if grid.ndim == 3:
        for ch in range(grid.shape[0]):
            noise[ch][mask] = rng.normal(0.0, sigma, size=int(mask.sum()))
    else:
        noise[mask] = rng.normal(0.0, sigma, size=int(mask.sum()))
    return noise


def perturb_band(
    image: np.ndarray,
    profile: BandProfile,
    sigma_scale: float,
    rng: np.random.Generator,
    clip: bool = True,
) -> np.ndarray:
    """Inject Gaussian noise into the image's most trigger-sensitive band.

    The image is transformed per channel, `band_confined_noise` is added on
    the high-band cells only, and the result is transformed back (and clipped
    to [0, 1] unless ``clip`` is off). Outside the high band the coefficient
    change is exactly zero before clipping. A scale of zero is the identity.
    """
    if sigma_scale < 0:
        raise ValueError("sigma_scale must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != profile.masks.shape[-2:]:
        raise ValueError("profile was built for a different image shape")
    if sigma_scale == 0:
        return image.copy()

    grid = dct2(image)
    out = idct2(grid + band_confined_noise(grid, profile, sigma_scale, rng))
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out
