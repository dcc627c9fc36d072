"""CT physics: unit conversions, parallel-beam projection, and the
projection-domain Poisson low-dose simulation.

A slice travels pixel -> HU -> linear attenuation (1/mm); projections are
parallel-beam line integrals scaled by the voxel size so sinogram entries
are dimensionless optical path lengths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "CtImage",
    "Sinogram",
    "ClampWarning",
    "MU_WATER_DEFAULT",
    "PADDING_SENTINEL_DEFAULT",
    "pixels_to_hu",
    "hu_to_pixels",
    "hu_to_mu",
    "mu_to_hu",
    "default_n_bins",
    "default_angles",
    "radon",
    "iradon",
    "poisson_sample",
    "simulate_low_dose",
]

MU_WATER_DEFAULT = 0.0192  # 1/mm, water at typical CT effective energies
PADDING_SENTINEL_DEFAULT = -2000.0
_KNUTH_CUTOFF = 30.0


class ClampWarning(UserWarning):
    """Emitted when zero photon counts had to be clamped before the log."""


@dataclass
class CtImage:
    """One 2-D CT slice with its rescale metadata.

    ``unit`` is one of ``pixel`` (stored values), ``HU``, or ``mu`` (1/mm);
    conversions return a new image with the tag updated.
    """

    grid: np.ndarray
    unit: str = "pixel"
    slope: float = 1.0
    intercept: float = -1024.0
    voxel: float = 1.0
    note: str | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"CtImage grid must be 2-D, got shape {self.grid.shape}")
        if self.unit not in ("pixel", "HU", "mu"):
            raise ValueError(f"unit must be pixel, HU or mu, got {self.unit!r}")
        if not self.voxel > 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def with_grid(self, grid: np.ndarray, unit: str | None = None, note: str | None = None) -> "CtImage":
        return CtImage(grid, unit or self.unit, self.slope, self.intercept, self.voxel, note)


@dataclass
class Sinogram:
    """Parallel-beam projection data: angles x detector bins."""

    grid: np.ndarray
    angles: np.ndarray
    bin_spacing: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"sinogram grid must be 2-D, got shape {self.grid.shape}")
        if self.angles.ndim != 1 or self.angles.shape[0] != self.grid.shape[0]:
            raise ValueError("angles must be a 1-D list matching the sinogram rows")
        if self.angles.size < 1:
            raise ValueError("at least one angle is required")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if np.any(self.angles < 0) or np.any(self.angles >= 180.0):
            raise ValueError("angles must lie in [0, 180) degrees")
        if not self.bin_spacing > 0:
            raise ValueError(f"bin_spacing must be positive, got {self.bin_spacing}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("sinogram entries must be finite")

    @property
    def n_angles(self) -> int:
        return self.grid.shape[0]

    @property
    def n_bins(self) -> int:
        return self.grid.shape[1]


def pixels_to_hu(img: CtImage, literal_eq: bool = False,
                 padding_value: float | None = PADDING_SENTINEL_DEFAULT) -> CtImage:
    """Convert stored pixel values to Hounsfield units.

    Default applies the DICOM rescale ``HU = pixel * slope + intercept``; the
    ``literal_eq`` compatibility mode divides by the slope instead. Pixels
    equal to ``padding_value`` map to -1024 HU (air).
    """
    if img.unit != "pixel":
        raise ValueError(f"pixels_to_hu expects a pixel image, got unit {img.unit!r}")
    if img.slope == 0:
        raise ValueError("rescale slope must be nonzero")
    if literal_eq:
        hu = img.grid / img.slope + img.intercept
    else:
        hu = img.grid * img.slope + img.intercept
    if padding_value is not None:
        hu = np.where(img.grid == padding_value, -1024.0, hu)
    return img.with_grid(hu, unit="HU")


def hu_to_pixels(img: CtImage, literal_eq: bool = False) -> CtImage:
    """Exact inverse of :func:`pixels_to_hu` (padding mapping excluded)."""
    if img.unit != "HU":
        raise ValueError(f"hu_to_pixels expects an HU image, got unit {img.unit!r}")
    if img.slope == 0:
        raise ValueError("rescale slope must be nonzero")
    if literal_eq:
        px = (img.grid - img.intercept) * img.slope
    else:
        px = (img.grid - img.intercept) / img.slope
    return img.with_grid(px, unit="pixel")


def hu_to_mu(img: CtImage, mu_water: float = MU_WATER_DEFAULT) -> CtImage:
    """HU to linear attenuation: mu = (mu_water/1000) * HU + mu_water,
    clamped at 0."""
    if img.unit != "HU":
        raise ValueError(f"hu_to_mu expects an HU image, got unit {img.unit!r}")
    if not mu_water > 0:
        raise ValueError(f"mu_water must be positive, got {mu_water}")
    mu = (mu_water / 1000.0) * img.grid + mu_water
    return img.with_grid(np.maximum(mu, 0.0), unit="mu")


def mu_to_hu(img: CtImage, mu_water: float = MU_WATER_DEFAULT) -> CtImage:
    """Algebraic inverse of :func:`hu_to_mu`."""
    if img.unit != "mu":
        raise ValueError(f"mu_to_hu expects a mu image, got unit {img.unit!r}")
    if not mu_water > 0:
        raise ValueError(f"mu_water must be positive, got {mu_water}")
    hu = 1000.0 * (img.grid - mu_water) / mu_water
    return img.with_grid(hu, unit="HU")


def default_n_bins(h: int, w: int) -> int:
    """Detector bins covering the image diagonal, rounded up to odd."""
    n = math.ceil(math.sqrt(2.0) * max(h, w))
    return n if n % 2 == 1 else n + 1


def default_angles(n_angles: int = 720) -> np.ndarray:
    """Equispaced projection angles in [0, 180) degrees."""
    if n_angles < 1:
        raise ValueError("need at least one angle")
    return np.arange(n_angles, dtype=np.float64) * (180.0 / n_angles)


def radon(img: CtImage, angles: Sequence[float] | np.ndarray | None = None,
          n_bins: int | None = None, bin_spacing: float | None = None,
          subdiv: int = 2) -> Sinogram:
    """Parallel-beam forward projection by subpixel splatting.

    Every pixel is split into ``subdiv`` x ``subdiv`` subpixels whose mass is
    distributed linearly between the two nearest detector bins, so the total
    mass of each projection equals ``voxel * sum(mu)`` exactly at every
    angle. Entries are dimensionless line integrals (mm times 1/mm).
    """
    if img.unit != "mu":
        raise ValueError(f"radon expects a mu image, got unit {img.unit!r}")
    if angles is None:
        angles = default_angles()
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("angle list must not be empty")
    if subdiv < 1:
        raise ValueError("subdiv must be >= 1")
    h, w = img.shape
    min_bins = default_n_bins(h, w)
    if n_bins is None:
        n_bins = min_bins
    elif n_bins < min_bins:
        raise ValueError(f"n_bins={n_bins} does not cover the image diagonal (needs >= {min_bins})")
    if bin_spacing is None:
        bin_spacing = img.voxel

    # Physical subpixel coordinates, centered on the image (x right, y down).
    off = ((np.arange(subdiv) + 0.5) / subdiv - 0.5)
    rows = (np.arange(h)[:, None] + off[None, :]).ravel()
    cols = (np.arange(w)[:, None] + off[None, :]).ravel()
    py = ((rows - (h - 1) / 2.0) * img.voxel)[:, None]
    px = ((cols - (w - 1) / 2.0) * img.voxel)[None, :]
    mass = np.repeat(np.repeat(img.grid, subdiv, axis=0), subdiv, axis=1)
    mass = (mass * (img.voxel ** 2 / (subdiv * subdiv * bin_spacing))).ravel()
    center = (n_bins - 1) / 2.0

    out = np.empty((angles.size, n_bins), dtype=np.float64)
    for i, ang in enumerate(angles):
        th = math.radians(ang)
        t = (px * math.cos(th) + py * math.sin(th)) / bin_spacing + center
        lo = np.floor(t).astype(np.int64).ravel()
        frac = t.ravel() - lo
        if lo.min() < -1 or lo.max() > n_bins - 1:
            raise ValueError(f"n_bins={n_bins} does not cover the projected image "
                             f"at angle {ang}")
        # shift by one so the lo = -1 edge case lands in a discard slot
        proj = np.bincount(lo + 1, weights=mass * (1.0 - frac), minlength=n_bins + 2)
        proj += np.bincount(lo + 2, weights=mass * frac, minlength=n_bins + 2)
        out[i] = proj[1:n_bins + 1]
    return Sinogram(out, angles, bin_spacing)


def _ramp_filter_response(m: int) -> np.ndarray:
    """Frequency response of the band-limited Ram-Lak kernel of length m."""
    n = np.concatenate([np.arange(0, m // 2 + 1), np.arange(m // 2 - 1, 0, -1) * -1.0])
    kernel = np.zeros(m, dtype=np.float64)
    kernel[0] = 0.25
    odd = np.abs(n) % 2 == 1
    kernel[odd] = -1.0 / (np.pi * n[odd]) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def iradon(sino: Sinogram, filter_name: str = "ramp",
           output_size: tuple[int, int] | None = None, voxel: float | None = None) -> CtImage:
    """Filtered backprojection with a Ram-Lak ramp filter.

    Each projection is filtered in the frequency domain, backprojected with
    bilinear interpolation, scaled by pi/(2 n_angles) and divided by the
    detector spacing to restore 1/mm units.
    """
    if filter_name != "ramp":
        raise ValueError(f"only the ramp filter is supported, got {filter_name!r}")
    if voxel is None:
        voxel = sino.bin_spacing
    n_angles, n_bins = sino.grid.shape
    if output_size is None:
        side = int(math.floor(n_bins / math.sqrt(2.0)))
        output_size = (side, side)
    h, w = output_size

    m = 2 ** max(6, math.ceil(math.log2(2 * n_bins)))
    resp = _ramp_filter_response(m)
    spectra = np.fft.fft(sino.grid, n=m, axis=1) * resp[None, :]
    filtered = np.real(np.fft.ifft(spectra, axis=1))[:, :n_bins]

    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yy, xx = np.meshgrid((np.arange(h) - cy) * voxel, (np.arange(w) - cx) * voxel, indexing="ij")
    center_bin = (n_bins - 1) / 2.0

    recon = np.zeros((h, w), dtype=np.float64)
    for i, ang in enumerate(sino.angles):
        th = math.radians(ang)
        tpos = (xx * math.cos(th) + yy * math.sin(th)) / sino.bin_spacing + center_bin
        b0 = np.floor(tpos).astype(np.int64)
        frac = tpos - b0
        b1 = b0 + 1
        v0 = np.where((b0 >= 0) & (b0 < n_bins), filtered[i][np.clip(b0, 0, n_bins - 1)], 0.0)
        v1 = np.where((b1 >= 0) & (b1 < n_bins), filtered[i][np.clip(b1, 0, n_bins - 1)], 0.0)
        recon += v0 * (1 - frac) + v1 * frac

    recon *= np.pi / (2.0 * n_angles)
    recon /= sino.bin_spacing
    note = "single-angle reconstruction: quality is not quantitative" if n_angles == 1 else None
    return CtImage(recon, unit="mu", voxel=voxel, note=note)


def _poisson_knuth(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Knuth's product-of-uniforms method, valid for small rates."""
    out = np.zeros(lam.shape, dtype=np.int64)
    limit = np.exp(-lam)
    prod = rng.random(lam.shape)
    active = prod > limit
    while np.any(active):
        prod[active] *= rng.random(int(active.sum()))
        out[active] += 1
        active &= prod > limit
    return out


def _poisson_ptrs(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Hoermann's transformed rejection (PTRS), exact for lam >= 10."""
    out = np.zeros(lam.shape, dtype=np.int64)
    pending = np.ones(lam.shape, dtype=bool)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * np.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    while np.any(pending):
        idx = np.nonzero(pending)[0]
        u = rng.random(idx.size) - 0.5
        v = rng.random(idx.size)
        us = 0.5 - np.abs(u)
        k = np.floor((2.0 * a[idx] / us + b[idx]) * u + lam[idx] + 0.43)
        fast = (us >= 0.07) & (v <= v_r[idx])
        reject = (k < 0) | ((us < 0.013) & (v > us)) | ~np.isfinite(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(v * inv_alpha[idx] / (a[idx] / (us * us) + b[idx]))
            rhs = k * loglam[idx] - lam[idx] - gammaln(k + 1.0)
        accept = fast | (~reject & (lhs <= rhs))
        take = idx[accept]
        out[take] = k[accept].astype(np.int64)
        pending[take] = False
    return out


def poisson_sample(lam, rng: np.random.Generator):
    """Exact Poisson variates for scalar or array rates.

    Uses Knuth's multiplicative method below rate 30 and transformed
    rejection above, so no normal approximation is involved anywhere.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam_arr)):
        raise ValueError("Poisson rate must be finite")
    if np.any(lam_arr < 0):
        raise ValueError("Poisson rate must be nonnegative")
    scalar = lam_arr.ndim == 0
    flat = lam_arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.int64)

    small = (flat > 0) & (flat < _KNUTH_CUTOFF)
    large = flat >= _KNUTH_CUTOFF
    if np.any(small):
        out[small] = _poisson_knuth(flat[small], rng)
    if np.any(large):
        out[large] = _poisson_ptrs(flat[large], rng)
    out = out.reshape(lam_arr.shape)
    return int(out) if scalar else out


def simulate_low_dose(nd: CtImage, i0: float, seed: int | np.random.Generator = 0,
                      angles: Sequence[float] | np.ndarray | None = None,
                      mu_water: float = MU_WATER_DEFAULT,
                      literal_eq: bool = False,
                      padding_value: float | None = PADDING_SENTINEL_DEFAULT,
                      _sampler: Callable | None = None) -> CtImage:
    """Simulate a reduced-flux acquisition of a normal-dose slice.

    The slice is projected, attenuated photon counts ``i0 * exp(-rho)`` are
    Poisson-sampled, the resulting extra noise projection is reconstructed
    and added to the attenuation image, and the result is converted back to
    stored pixel values. Zero counts are clamped to one photon before the
    logarithm; if more than 1% of bins clamp, a :class:`ClampWarning` with
    the clamp fraction is emitted.
    """
    if not i0 > 0:
        raise ValueError(f"incident flux i0 must be positive, got {i0}")
    if nd.unit != "pixel":
        raise ValueError(f"simulate_low_dose expects a pixel image, got unit {nd.unit!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sampler = _sampler if _sampler is not None else poisson_sample

    hu_nd = pixels_to_hu(nd, literal_eq=literal_eq, padding_value=padding_value)
    mu_nd = hu_to_mu(hu_nd, mu_water=mu_water)
    rho_nd = radon(mu_nd, angles=angles)

    # Beer-Lambert: the transmitted fraction decays with optical path.
    t_nd = np.exp(-rho_nd.grid)
    t_ld = np.asarray(sampler(i0 * t_nd, rng), dtype=np.float64)
    clamped = t_ld < 1.0
    if np.any(clamped):
        frac = clamped.mean()
        t_ld = np.maximum(t_ld, 1.0)
        if frac > 0.01:
            warnings.warn(
                f"{frac:.1%} of detector bins recorded zero photons and were clamped",
                ClampWarning, stacklevel=2)
    rho_ld = np.log(i0 / t_ld)
    rho_noise = rho_nd.grid - rho_ld

    noise_mu = iradon(Sinogram(rho_noise, rho_nd.angles, rho_nd.bin_spacing),
                      output_size=nd.shape, voxel=nd.voxel)
    mu_ld = mu_nd.with_grid(mu_nd.grid + noise_mu.grid)
    hu_ld = mu_to_hu(mu_ld, mu_water=mu_water)
    return hu_to_pixels(hu_ld, literal_eq=literal_eq)
