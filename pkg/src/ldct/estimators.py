"""Scikit-learn style wrappers around the simulation and denoising pipeline.

``LowDoseSimulator`` is a stateless transformer turning normal-dose slices
into simulated low-dose ones; ``DilatedResidualDenoiser`` trains the dilated
residual network on aligned image pairs and denoises with ``predict``. Both
operate on stacks of 2-D slices in stored pixel units ([0, 4095]).
"""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autodiff import Tensor
from .metrics import psnr
from .network import build_arch, forward
from .perceptual import InputAdapter, LossConfig, load_weights
from .physics import CtImage, MU_WATER_DEFAULT, default_angles, simulate_low_dose
from .training import (PIXEL_PEAK, TrainConfig, build_patchset, train)

__all__ = ["LowDoseSimulator", "DilatedResidualDenoiser"]


def _validate_images(X, name: str = "X") -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a (n_images, h, w) stack of 2-D slices, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


class LowDoseSimulator(BaseEstimator, TransformerMixin):
    """Projection-domain Poisson low-dose simulation as a transformer.

    Parameters mirror the simulation pipeline: incident flux ``i0``, number
    of projection angles, water attenuation, and the pixel-to-HU rescale
    metadata. Each slice gets an independent, reproducible substream derived
    from ``seed`` and its index.
    """

    def __init__(self, i0: float = 2e3, n_angles: int = 720, seed: int = 0,
                 mu_water: float = MU_WATER_DEFAULT, slope: float = 1.0,
                 intercept: float = -1024.0, voxel: float = 1.0, hu_literal: bool = False):
        self.i0 = i0
        self.n_angles = n_angles
        self.seed = seed
        self.mu_water = mu_water
        self.slope = slope
        self.intercept = intercept
        self.voxel = voxel
        self.hu_literal = hu_literal

    def fit(self, X=None, y=None):
        if self.i0 <= 0:
            raise ValueError(f"i0 must be positive, got {self.i0}")
        return self

    def transform(self, X) -> np.ndarray:
        self.fit()
        arr = _validate_images(X)
        angles = default_angles(self.n_angles)
        out = np.empty_like(arr)
        for i, grid in enumerate(arr):
            img = CtImage(grid, unit="pixel", slope=self.slope,
                          intercept=self.intercept, voxel=self.voxel)
            sim = simulate_low_dose(img, i0=self.i0, seed=np.random.default_rng([self.seed, i]),
                                    angles=angles, mu_water=self.mu_water,
                                    literal_eq=self.hu_literal)
            out[i] = sim.grid
        return out


class DilatedResidualDenoiser(BaseEstimator):
    """Dilated residual denoising network with a fit/predict interface.

    ``fit(X, y)`` trains on aligned low-dose (``X``) / normal-dose (``y``)
    slices using the two-stage Adam schedule; ``predict(X)`` denoises
    full-size slices in inference mode. ``loss`` selects MSE ('m'),
    perceptual ('p') or the weighted combination ('mp'); perceptual modes
    need ``extractor_weights`` (path to a weight container).
    """

    def __init__(self, variant: str = "drl-e", n_filters: int = 64, loss: str = "m",
                 lambda_mse: float = 1.0, lambda_p: float = 0.01, patch: int = 40,
                 stride: int = 20, epochs: tuple[int, int] = (20, 20),
                 lrs: tuple[float, float] = (1e-3, 1e-4), batch: int = 64, seed: int = 0,
                 extractor_weights: str | None = None, adapter: str = "identity",
                 checkpoint_dir: str | None = None):
        self.variant = variant
        self.n_filters = n_filters
        self.loss = loss
        self.lambda_mse = lambda_mse
        self.lambda_p = lambda_p
        self.patch = patch
        self.stride = stride
        self.epochs = epochs
        self.lrs = lrs
        self.batch = batch
        self.seed = seed
        self.extractor_weights = extractor_weights
        self.adapter = adapter
        self.checkpoint_dir = checkpoint_dir

    def _loss_config(self) -> LossConfig:
        if self.loss not in ("m", "p", "mp"):
            raise ValueError(f"loss must be 'm', 'p' or 'mp', got {self.loss!r}")
        lam_mse = self.lambda_mse if self.loss in ("m", "mp") else 0.0
        lam_p = self.lambda_p if self.loss in ("p", "mp") else 0.0
        return LossConfig(lambda_mse=lam_mse, lambda_p=lam_p,
                          adapter=InputAdapter.named(self.adapter))

    def fit(self, X, y):
        X = _validate_images(X, "X")
        y = _validate_images(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X and y must be aligned stacks, got {X.shape} vs {y.shape}")
        loss_cfg = self._loss_config()
        store = None
        if loss_cfg.lambda_p > 0:
            if self.extractor_weights is None:
                raise ValueError("loss includes a perceptual term but extractor_weights "
                                 "is not set")
            store = load_weights(self.extractor_weights)
        cfg = TrainConfig(variant=self.variant, n_filters=self.n_filters, patch=self.patch,
                          stride=self.stride, epochs=tuple(self.epochs),
                          lrs=tuple(self.lrs), batch=self.batch, seed=self.seed,
                          loss=loss_cfg)
        pairs = [(lo / PIXEL_PEAK, nd / PIXEL_PEAK) for lo, nd in zip(X, y)]
        data = build_patchset(pairs, patch=self.patch, stride=self.stride)
        if self.checkpoint_dir is not None:
            ckpt, rows = train(cfg, data, self.checkpoint_dir, store=store)
        else:
            with tempfile.TemporaryDirectory() as tmp:
                ckpt, rows = train(cfg, data, tmp, store=store)
        self.arch_ = build_arch(self.variant, self.n_filters)
        self.params_ = ckpt.params
        self.loss_log_ = rows
        self.n_patches_ = len(data)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this DilatedResidualDenoiser instance is not fitted yet; "
                                 "call fit before predict")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        arr = _validate_images(X)
        out = np.empty_like(arr)
        for i, grid in enumerate(arr):
            x = Tensor((grid / PIXEL_PEAK).astype(np.float32)[None, None])
            pred = forward(self.arch_, self.params_, x, mode="infer")
            out[i] = np.clip(pred.data[0, 0].astype(np.float64) * PIXEL_PEAK, 0.0, None)
        return out

    def score(self, X, y) -> float:
        """Mean PSNR (dB, peak 4095) of ``predict(X)`` against ``y``."""
        self._check_fitted()
        y = _validate_images(y, "y")
        preds = self.predict(X)
        return float(np.mean([psnr(p, t, peak=PIXEL_PEAK) for p, t in zip(preds, y)]))
