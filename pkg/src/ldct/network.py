"""Dilated residual denoising networks.

``build_arch`` produces the 8-layer dilated topology with symmetric
concatenation shortcuts, optionally fronted by the fixed Sobel edge layer;
``forward`` executes it on the autodiff engine. The receptive-field and
weight-count calculators implement the closed forms the architecture is
sized by.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (BatchNormState, Tensor, batch_norm, concat_channels,
                       conv2d_dilated, relu)

__all__ = [
    "LayerSpec",
    "ArchSpec",
    "NetParams",
    "SOBEL_KERNELS",
    "sobel_edge_maps",
    "build_arch",
    "receptive_field",
    "receptive_field_per_layer",
    "count_weights",
    "count_trainable",
    "init_glorot",
    "forward",
    "arch_table",
]

# Horizontal, vertical and the two diagonal Sobel operators.
SOBEL_KERNELS = np.array([
    [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
    [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
    [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
    [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]],
], dtype=np.float32).reshape(4, 1, 3, 3)

_SOBEL_TENSOR = Tensor(SOBEL_KERNELS, requires_grad=False, name="sobel")


@dataclass(frozen=True)
class LayerSpec:
    """One trainable convolutional layer."""

    filter_size: int
    dilation: int
    in_channels: int
    out_channels: int
    batch_norm: bool
    activation: str  # relu | identity

    def __post_init__(self):
        if self.filter_size % 2 == 0 or self.filter_size < 1:
            raise ValueError(f"filter size must be odd and positive, got {self.filter_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ArchSpec:
    """Layer list plus concatenation shortcuts.

    Shortcut ``(src, dst)`` appends the output of layer ``src`` (0 = the raw
    network input image) to the input of layer ``dst``. Channel arithmetic is
    validated on construction.
    """

    layers: tuple[LayerSpec, ...]
    shortcuts: tuple[tuple[int, int], ...] = ()
    edge_layer: bool = False
    variant: str = "custom"
    image_channels: int = 1

    def __post_init__(self):
        for src, dst in self.shortcuts:
            if not 0 <= src < dst <= len(self.layers):
                raise ValueError(f"shortcut source {src} must strictly precede destination {dst}")
        for i in range(1, len(self.layers) + 1):
            expect = self.input_channels(i)
            got = self.layers[i - 1].in_channels
            if expect != got:
                raise ValueError(
                    f"layer {i} declares in_channels={got} but its inputs concatenate "
                    f"to {expect} channels")

    def _source_channels(self, src: int) -> int:
        return self.image_channels if src == 0 else self.layers[src - 1].out_channels

    def input_channels(self, layer_index: int) -> int:
        """Concatenated input width of a 1-based layer index."""
        if layer_index == 1:
            base = self.image_channels + (4 if self.edge_layer else 0)
        else:
            base = self.layers[layer_index - 2].out_channels
        return base + sum(self._source_channels(s) for s, d in self.shortcuts if d == layer_index)


@dataclass
class NetParams:
    """Named trainable tensors plus per-layer batch-norm running stats.

    Tensor names follow the checkpoint convention
    ``param.<layer>.<w|b|gamma|beta>``.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[int, BatchNormState] = field(default_factory=dict)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def copy(self) -> "NetParams":
        return NetParams(
            tensors={k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name)
                     for k, v in self.tensors.items()},
            bn={k: v.copy() for k, v in self.bn.items()},
        )


def sobel_edge_maps(x: Tensor) -> Tensor:
    """Fixed four-direction edge layer on a single-channel image.

    The kernels are constants: gradients pass through to ``x`` but never
    update the filters.
    """
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"edge layer expects a single-channel NCHW tensor, got shape {x.shape}")
    return conv2d_dilated(x, _SOBEL_TENSOR, b=None, r=1)


_DILATIONS = (1, 2, 3, 4, 3, 2, 1, 1)
_SHORTCUTS = ((3, 6), (2, 7), (0, 8))


def build_arch(variant: str, n_filters: int = 64) -> ArchSpec:
    """The 8-layer dilated residual architecture.

    ``drl`` takes the raw image; ``drl-e`` prepends the edge layer so layer 1
    sees the image plus four edge maps. Layer 1 uses a 5x5 filter, layers
    2-8 are 3x3 with dilations (1,2,3,4,3,2,1,1); layers 7 and 8 have one
    filter; batch norm sits on layers 2-7 and the final layer is linear.
    """
    if variant not in ("drl", "drl-e"):
        raise ValueError(f"variant must be 'drl' or 'drl-e', got {variant!r}")
    if n_filters < 1:
        raise ValueError(f"n_filters must be >= 1, got {n_filters}")
    edge = variant == "drl-e"
    out_channels = (n_filters,) * 6 + (1, 1)
    layers = []
    for i in range(8):
        if i == 0:
            in_c = 5 if edge else 1
        else:
            in_c = out_channels[i - 1]
        in_c += sum(1 if s == 0 else out_channels[s - 1] for s, d in _SHORTCUTS if d == i + 1)
        layers.append(LayerSpec(
            filter_size=5 if i == 0 else 3,
            dilation=_DILATIONS[i],
            in_channels=in_c,
            out_channels=out_channels[i],
            batch_norm=(1 <= i <= 6),
            activation="relu" if i < 7 else "identity",
        ))
    return ArchSpec(tuple(layers), _SHORTCUTS, edge_layer=edge, variant=variant)


def receptive_field(arch: ArchSpec) -> int:
    """Receptive field folded over the trainable layers (edge layer
    excluded): RF_L = RF_{L-1} + (f-1) r, starting from 1."""
    rf = 1
    for layer in arch.layers:
        rf += (layer.filter_size - 1) * layer.dilation
    return rf


def receptive_field_per_layer(arch: ArchSpec) -> list[int]:
    rf = 1
    out = []
    for layer in arch.layers:
        rf += (layer.filter_size - 1) * layer.dilation
        out.append(rf)
    return out


def count_weights(f: int, n: int, c: int, num_layers: int) -> int:
    """Closed-form weight count of a uniform N-layer f x f conv network with
    n filters per layer and c image channels (biases excluded)."""
    if num_layers < 2:
        raise ValueError("the closed form needs at least 2 layers")
    return n * f * f * c + n * n * f * f * (num_layers - 2) + n * f * f * c


def count_trainable(arch: ArchSpec) -> int:
    """Exact trainable parameter count: kernels, biases and BN affines."""
    total = 0
    for layer in arch.layers:
        total += layer.out_channels * layer.in_channels * layer.filter_size ** 2
        total += layer.out_channels
        if layer.batch_norm:
            total += 2 * layer.out_channels
    return total


def init_glorot(arch: ArchSpec, seed: int = 0) -> NetParams:
    """Glorot-normal kernels (variance 2/(fan_in+fan_out), fans counted as
    channels x f^2), zero biases, unit batch-norm affines."""
    rng = np.random.default_rng(seed)
    params = NetParams()
    for i, layer in enumerate(arch.layers, start=1):
        f = layer.filter_size
        fan_in = layer.in_channels * f * f
        fan_out = layer.out_channels * f * f
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, std, size=(layer.out_channels, layer.in_channels, f, f))
        params.tensors[f"param.{i}.w"] = Tensor(w.astype(np.float32), requires_grad=True,
                                                name=f"param.{i}.w")
        params.tensors[f"param.{i}.b"] = Tensor(np.zeros(layer.out_channels, dtype=np.float32),
                                                requires_grad=True, name=f"param.{i}.b")
        if layer.batch_norm:
            params.tensors[f"param.{i}.gamma"] = Tensor(
                np.ones(layer.out_channels, dtype=np.float32), requires_grad=True,
                name=f"param.{i}.gamma")
            params.tensors[f"param.{i}.beta"] = Tensor(
                np.zeros(layer.out_channels, dtype=np.float32), requires_grad=True,
                name=f"param.{i}.beta")
            params.bn[i] = BatchNormState.fresh(layer.out_channels)
    return params


def _check_params(arch: ArchSpec, params: NetParams) -> None:
    for i, layer in enumerate(arch.layers, start=1):
        f = layer.filter_size
        expect = (layer.out_channels, layer.in_channels, f, f)
        w = params.tensors.get(f"param.{i}.w")
        if w is None or w.shape != expect:
            raise ValueError(
                f"param.{i}.w has shape {None if w is None else w.shape}, expected {expect}")
        if layer.batch_norm and i not in params.bn:
            raise ValueError(f"missing batch-norm state for layer {i}")


def forward(arch: ArchSpec, params: NetParams, x: Tensor, mode: str = "train") -> Tensor:
    """Run the network; output has the input's shape (fully convolutional,
    one channel). The denoised image is predicted directly."""
    if x.data.ndim != 4 or x.shape[1] != arch.image_channels:
        raise ValueError(
            f"input must be (n, {arch.image_channels}, h, w), got shape {x.shape}")
    _check_params(arch, params)
    outputs: dict[int, Tensor] = {0: x}
    h = concat_channels(x, sobel_edge_maps(x)) if arch.edge_layer else x
    for i, layer in enumerate(arch.layers, start=1):
        inp = h if i == 1 else outputs[i - 1]
        for src, dst in arch.shortcuts:
            if dst == i:
                inp = concat_channels(inp, outputs[src])
        y = conv2d_dilated(inp, params.tensors[f"param.{i}.w"],
                           params.tensors[f"param.{i}.b"], r=layer.dilation)
        if layer.batch_norm:
            y = batch_norm(y, params.tensors[f"param.{i}.gamma"],
                           params.tensors[f"param.{i}.beta"], params.bn[i], mode=mode)
        if layer.activation == "relu":
            y = relu(y)
        outputs[i] = y
    return outputs[len(arch.layers)]


def arch_table(arch: ArchSpec) -> str:
    """Human-readable layer table with running receptive field."""
    rows = [("layer", "filter", "dilation", "in", "out", "bn", "act", "rf")]
    if arch.edge_layer:
        rows.append(("edge", "3x3", "1", "1", "4", "-", "fixed sobel", "-"))
    rfs = receptive_field_per_layer(arch)
    for i, layer in enumerate(arch.layers, start=1):
        rows.append((str(i), f"{layer.filter_size}x{layer.filter_size}", str(layer.dilation),
                     str(layer.in_channels), str(layer.out_channels),
                     "yes" if layer.batch_norm else "no", layer.activation, str(rfs[i - 1])))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)) for row in rows]
    return "\n".join(lines)
