"""Frozen four-block feature extractor and the combined objective.

The extractor follows the classic 16-layer classification network's first
four conv blocks: (2x64, 2x128, 3x256, 3x512) 3x3 convs with ReLU, 2x2 max
pooling between blocks, feature taps after the last ReLU of each block.
Weights are loaded from the shared container format and are never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, add, affine_channels, concat_channels,
                       conv2d_dilated, max_pool_2x2, mse_loss, relu, scale)
from .container import ContainerError, read_container, write_container

__all__ = [
    "BLOCKS",
    "FeatureExtractorSpec",
    "InputAdapter",
    "LossConfig",
    "WeightStore",
    "expected_shapes",
    "random_weights",
    "save_weights",
    "load_weights",
    "extract_features",
    "perceptual_loss",
    "combined_loss",
]

# (number of convs, output channels) per block.
BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512))

# Channel statistics classification-pretrained weights expect: inputs scaled
# to [0, 255] with the dataset mean removed per channel.
_PRETRAIN_SCALE = 255.0
_PRETRAIN_MEANS = (123.68, 116.779, 103.939)


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Fixed block layout of the extractor; tap i halves the spatial size
    i-1 times."""

    blocks: tuple[tuple[int, int], ...] = BLOCKS
    in_channels: int = 3
    filter_size: int = 3


def expected_shapes(spec: FeatureExtractorSpec = FeatureExtractorSpec()) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes a weight container must provide."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_c = spec.in_channels
    f = spec.filter_size
    for b, (n_convs, out_c) in enumerate(spec.blocks, start=1):
        for k in range(1, n_convs + 1):
            shapes[f"feat.b{b}.c{k}.w"] = (out_c, in_c, f, f)
            shapes[f"feat.b{b}.c{k}.b"] = (out_c,)
            in_c = out_c
    return shapes


@dataclass
class InputAdapter:
    """Per-channel affine applied after gray replication.

    ``identity`` leaves values alone (right for randomly initialized
    extractors); ``imagenet`` rescales to the statistics classification
    weights were trained with.
    """

    mul: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "identity"

    @classmethod
    def identity(cls) -> "InputAdapter":
        return cls()

    @classmethod
    def imagenet(cls) -> "InputAdapter":
        return cls(mul=(_PRETRAIN_SCALE,) * 3,
                   shift=tuple(-m for m in _PRETRAIN_MEANS), name="imagenet")

    @classmethod
    def named(cls, name: str) -> "InputAdapter":
        if name == "identity":
            return cls.identity()
        if name == "imagenet":
            return cls.imagenet()
        raise ValueError(f"unknown adapter {name!r}")


@dataclass
class LossConfig:
    """Weights of the combined objective; both terms must not vanish."""

    lambda_mse: float = 1.0
    lambda_p: float = 0.01
    adapter: InputAdapter = field(default_factory=InputAdapter.identity)

    def __post_init__(self):
        if self.lambda_mse < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_mse + self.lambda_p <= 0:
            raise ValueError("at least one loss weight must be positive")


class WeightStore:
    """Validated, frozen extractor weights."""

    def __init__(self, tensors: dict[str, np.ndarray],
                 spec: FeatureExtractorSpec = FeatureExtractorSpec(), source: str = "<memory>"):
        shapes = expected_shapes(spec)
        missing = sorted(set(shapes) - set(tensors))
        extra = sorted(set(tensors) - set(shapes))
        if missing:
            raise ContainerError(f"{source}: missing extractor tensors: {', '.join(missing)}")
        if extra:
            raise ContainerError(f"{source}: unexpected extractor tensors: {', '.join(extra)}")
        self.spec = spec
        self.tensors: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = tensors[name]
            if tuple(arr.shape) != shape:
                raise ContainerError(
                    f"{source}: tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
            self.tensors[name] = Tensor(arr.astype(np.float32), requires_grad=False, name=name)

    def raw(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def random_weights(seed: int = 0, scale: float = 1.0,
                   spec: FeatureExtractorSpec = FeatureExtractorSpec()) -> WeightStore:
    """Glorot-random extractor, for testing without a pretrained asset."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(spec).items():
        if name.endswith(".w"):
            out_c, in_c, f, _ = shape
            std = scale * np.sqrt(2.0 / ((in_c + out_c) * f * f))
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return WeightStore(tensors, spec, source=f"<random seed={seed}>")


def save_weights(path, store: WeightStore) -> None:
    write_container(path, store.raw())


def load_weights(path, spec: FeatureExtractorSpec = FeatureExtractorSpec()) -> WeightStore:
    """Load extractor weights from a container, validating names and shapes."""
    return WeightStore(read_container(path), spec, source=str(path))


def _replicate_gray(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"extractor input must be (n, 1, h, w), got shape {x.shape}")
    return concat_channels(concat_channels(x, x), x)


def extract_features(x: Tensor, store: WeightStore,
                     adapter: InputAdapter | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Tap tensors of the four blocks for a single-channel input.

    Spatial size must be divisible by 8 (three poolings before the last
    tap). Differentiable w.r.t. ``x``; the weights never receive gradients.
    """
    n, _, h, w = x.shape
    if h % 8 or w % 8:
        raise ValueError(
            f"spatial size {h}x{w} must be divisible by 8; pad to "
            f"{-(-h // 8) * 8}x{-(-w // 8) * 8} first")
    adapter = adapter or InputAdapter.identity()
    y = _replicate_gray(x)
    y = affine_channels(y, np.asarray(adapter.mul), np.asarray(adapter.shift))
    taps = []
    for b, (n_convs, _) in enumerate(store.spec.blocks, start=1):
        for k in range(1, n_convs + 1):
            y = conv2d_dilated(y, store.tensors[f"feat.b{b}.c{k}.w"],
                               store.tensors[f"feat.b{b}.c{k}.b"], r=1)
            y = relu(y)
        taps.append(y)
        if b < len(store.spec.blocks):
            y = max_pool_2x2(y)
    return tuple(taps)


def perceptual_loss(pred: Tensor, target: Tensor, store: WeightStore,
                    adapter: InputAdapter | None = None) -> Tensor:
    """Sum over blocks of size-normalized squared tap differences.

    Each term is the mean squared difference over the tap's elements (the
    batch dimension is averaged as well). Gradient flows to ``pred`` only.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    target_taps = extract_features(target.detach(), store, adapter)
    pred_taps = extract_features(pred, store, adapter)
    total = None
    for pt, tt in zip(pred_taps, target_taps):
        term = mse_loss(pt, tt.detach())
        total = term if total is None else add(total, term)
    return total


def combined_loss(pred: Tensor, target: Tensor, cfg: LossConfig,
                  store: WeightStore | None = None) -> tuple[Tensor, float, float]:
    """Weighted objective; returns (loss, weighted mse term, weighted
    perceptual term) with the terms as plain floats for logging."""
    if cfg.lambda_p > 0 and store is None:
        raise ValueError("perceptual weight is positive but no extractor weights were given")
    parts = []
    mse_term = 0.0
    p_term = 0.0
    if cfg.lambda_mse > 0:
        t = scale(mse_loss(pred, target), cfg.lambda_mse)
        mse_term = t.item()
        parts.append(t)
    if cfg.lambda_p > 0:
        t = scale(perceptual_loss(pred, target, store, cfg.adapter), cfg.lambda_p)
        p_term = t.item()
        parts.append(t)
    loss = parts[0]
    for t in parts[1:]:
        loss = add(loss, t)
    return loss, mse_term, p_term
