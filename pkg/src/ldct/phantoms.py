"""Synthetic slices for demos and tests: Shepp-Logan and random ellipse
phantoms with CT-style pixel values (slope 1, intercept -1024)."""

from __future__ import annotations

import numpy as np

from .physics import CtImage

__all__ = ["shepp_logan", "disk_phantom", "square_phantom", "ellipse_phantom", "phantom_set"]

# Ellipses as (value, a, b, x0, y0, phi_deg) on the [-1, 1]^2 square.
# Toft's modified contrast variant of the classic head phantom.
_SHEPP_LOGAN = [
    (1.00, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.80, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.10, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.10, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.10, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.10, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.605, 0.0),
]


def shepp_logan(size: int = 128, supersample: int = 4) -> np.ndarray:
    """Modified Shepp-Logan head phantom with values in [0, 1].

    Rasterized on a ``supersample``-times finer grid and area-averaged down,
    so ellipse boundaries are band-limited rather than aliased.
    """
    n = size * supersample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(-coords, coords, indexing="ij")
    img = np.zeros((n, n), dtype=np.float64)
    for value, a, b, x0, y0, phi in _SHEPP_LOGAN:
        th = np.deg2rad(phi)
        xr = (xx - x0) * np.cos(th) + (yy - y0) * np.sin(th)
        yr = -(xx - x0) * np.sin(th) + (yy - y0) * np.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    img = np.clip(img, 0.0, 1.0)
    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return img


def disk_phantom(size: int, radius: float, value: float, center: tuple[float, float] | None = None) -> np.ndarray:
    """Uniform disk of the given value on a zero background (pixel units)."""
    cy, cx = center if center is not None else ((size - 1) / 2.0, (size - 1) / 2.0)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size), dtype=np.float64)
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = value
    return img


def square_phantom(size: int, half_side: int, value: float) -> np.ndarray:
    """Axis-aligned centered square, edges on the pixel grid."""
    img = np.zeros((size, size), dtype=np.float64)
    c = size // 2
    img[c - half_side:c + half_side, c - half_side:c + half_side] = value
    return img


# Stored value of clean air (-1000 HU at intercept -1024); keeping the
# background here, not at 0, keeps phantoms inside the invertible HU range.
AIR_PIXEL = 24.0


def ellipse_phantom(size: int, rng: np.random.Generator, body_value: float = 2400.0,
                    structure_range: float = 400.0) -> np.ndarray:
    """Random abdomen-like slice in stored pixel values [24, 4095].

    A uniform body ellipse with a few random internal structures on an air
    background. The default body value is dense enough that a 2e3-photon
    acquisition of a 64 px slice is strongly degraded.
    """
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((size, size), AIR_PIXEL, dtype=np.float64)

    body_a = rng.uniform(0.62, 0.8)
    body_b = rng.uniform(0.62, 0.8)
    body = (xx / body_a) ** 2 + (yy / body_b) ** 2 <= 1.0
    img[body] = body_value + rng.uniform(-100.0, 100.0)

    for _ in range(rng.integers(2, 6)):
        a = rng.uniform(0.1, 0.35)
        b = rng.uniform(0.1, 0.35)
        x0 = rng.uniform(-0.4, 0.4)
        y0 = rng.uniform(-0.4, 0.4)
        th = rng.uniform(0.0, np.pi)
        xr = (xx - x0) * np.cos(th) + (yy - y0) * np.sin(th)
        yr = -(xx - x0) * np.sin(th) + (yy - y0) * np.cos(th)
        inside = ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0) & body
        img[inside] += rng.uniform(-structure_range, structure_range)

    return np.clip(img, AIR_PIXEL, 4095.0)


def phantom_set(count: int, size: int, seed: int = 0) -> list[CtImage]:
    """Deterministic series of random ellipse phantoms as pixel CtImages.

    Consecutive slices drift slowly, mimicking neighbouring slices of one
    scan, so an ordered 70/30 split is meaningful.
    """
    rng = np.random.default_rng(seed)
    base = ellipse_phantom(size, rng)
    slices = []
    current = base
    for i in range(count):
        if i > 0 and i % 4 == 0:
            current = ellipse_phantom(size, rng)
        jitter = rng.normal(0.0, 6.0, size=current.shape)
        grid = np.clip(current + jitter, AIR_PIXEL, 4095.0)
        slices.append(CtImage(grid, unit="pixel", slope=1.0, intercept=-1024.0, voxel=1.0))
    return slices


def main(argv: list[str] | None = None) -> int:
    """Write a phantom series as 16-bit PGM slices with JSON sidecars."""
    import argparse

    from .pgm import write_slice

    ap = argparse.ArgumentParser(description=main.__doc__)
    ap.add_argument("outdir", help="output directory")
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    from pathlib import Path

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(phantom_set(args.count, args.size, args.seed)):
        write_slice(outdir / f"slice_{i:04d}.pgm", img)
    print(f"wrote {args.count} slices to {outdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
