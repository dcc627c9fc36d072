"""Minimal reverse-mode differentiation on NCHW arrays.

Only the operators the denoising networks need are provided. Gradients are
recorded on an explicit :class:`Tape`; with no active tape every operator is
a plain forward computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "GradCheckFailure",
    "conv2d_dilated",
    "relu",
    "batch_norm",
    "concat_channels",
    "max_pool_2x2",
    "mse_loss",
    "tensor_sum",
    "add",
    "scale",
    "affine_channels",
    "grad_check",
]

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Numeric array with an optional gradient buffer.

    Activations are rank-4 ``(batch, channels, height, width)``; parameters
    may be rank-1 (biases, batch-norm affines) or rank-4 (kernels). Losses
    are rank-0. Ops validate the ranks they require.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    ``backward`` replays the record in exact reverse order, summing the
    contributions of every consumer into each input's ``grad`` buffer.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def op_names(self) -> list[str]:
        return [n.op for n in self._nodes]

    def _record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        seen: set[int] = set()
        for node in self._nodes:
            for t in (*node.inputs, node.output):
                if id(t) not in seen:
                    t.grad = None
                    seen.add(id(t))
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self._nodes):
            if node.output.grad is not None:
                node.backward(node.output.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _result(op: str, inputs: Sequence[Tensor], data: np.ndarray,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(op, inputs, out, backward)
    return out


def _require_nchw(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{what} must be rank-4 (n, c, h, w), got rank {t.data.ndim}")


# Largest im2col buffer (elements) built at once; larger convolutions are
# processed in row bands. Caching for backward stops at the same limit.
_COL_ELEMENT_LIMIT = 1 << 25


def _im2col_band(xpad: np.ndarray, f: int, r: int, wd: int, i0: int, i1: int) -> np.ndarray:
    """Flattened (n, c*f*f, rows*wd) patch matrix for output rows [i0, i1)."""
    n, c = xpad.shape[:2]
    rows = i1 - i0
    sn, sc, sh, sw = xpad.strides
    win = np.lib.stride_tricks.as_strided(
        xpad[:, :, i0:, :], shape=(n, c, f, f, rows, wd),
        strides=(sn, sc, sh * r, sw * r, sh, sw))
    return np.ascontiguousarray(win).reshape(n, c * f * f, rows * wd)


def _row_bands(h: int, per_row: int) -> list[tuple[int, int]]:
    band = max(1, min(h, _COL_ELEMENT_LIMIT // max(per_row, 1)))
    return [(i, min(i + band, h)) for i in range(0, h, band)]


def conv2d_dilated(x: Tensor, w: Tensor, b: Tensor | None = None, r: int = 1) -> Tensor:
    """Dilated 2-D convolution with symmetric zero padding.

    Kernel ``w`` has shape ``(out_c, in_c, f, f)`` with ``f`` odd; padding is
    ``(f - 1) * r / 2`` per side so the output keeps the input's spatial size.
    """
    _require_nchw(x, "conv input x")
    if w.data.ndim != 4:
        raise ValueError(f"kernel w must be rank-4 (out_c, in_c, f, f), got rank {w.data.ndim}")
    out_c, in_c, f1, f2 = w.shape
    if f1 != f2:
        raise ValueError(f"kernel must be square, got {f1}x{f2}")
    f = f1
    if f % 2 == 0:
        raise ValueError(f"filter size must be odd, got f={f}")
    if r < 1:
        raise ValueError(f"dilation rate must be >= 1, got r={r}")
    n, c, h, wd = x.shape
    if c != in_c:
        raise ValueError(f"channel mismatch: input has {c} channels, kernel expects in_c={in_c}")
    if b is not None:
        if b.data.ndim != 1 or b.shape[0] != out_c:
            raise ValueError(f"bias must have shape ({out_c},), got {b.shape}")

    pad = (f - 1) * r // 2
    xpad = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xpad[:, :, pad:pad + h, pad:pad + wd] = x.data

    # im2col + one matmul per row band; the band split depends only on the
    # shapes, so results are reproducible run to run.
    wmat = w.data.reshape(out_c, in_c * f * f)
    per_row = n * c * f * f * wd
    bands = _row_bands(h, per_row)
    y = np.empty((n, out_c, h, wd), dtype=x.dtype)
    cache: np.ndarray | None = None
    for i0, i1 in bands:
        xcol = _im2col_band(xpad, f, r, wd, i0, i1)
        y[:, :, i0:i1] = np.matmul(wmat, xcol).reshape(n, out_c, i1 - i0, wd)
        if len(bands) == 1 and w.requires_grad:
            cache = xcol
    if b is not None:
        y += b.data.reshape(1, out_c, 1, 1)

    inputs = (x, w) if b is None else (x, w, b)

    def backward(gy: np.ndarray) -> None:
        gyf = gy.reshape(n, out_c, h * wd)
        if x.requires_grad:
            gcol = np.matmul(wmat.T, gyf).reshape(n, c, f, f, h, wd)
            gxpad = np.zeros(xpad.shape, dtype=gy.dtype)
            for k1 in range(f):
                for k2 in range(f):
                    gxpad[:, :, k1 * r:k1 * r + h, k2 * r:k2 * r + wd] += gcol[:, :, k1, k2]
            _accumulate(x, gxpad[:, :, pad:pad + h, pad:pad + wd])
        if w.requires_grad:
            if cache is not None:
                gw = np.tensordot(gyf, cache, axes=([0, 2], [0, 2]))
            else:
                gw = np.zeros((out_c, in_c * f * f), dtype=gy.dtype)
                for i0, i1 in bands:
                    xcol = _im2col_band(xpad, f, r, wd, i0, i1)
                    gband = gy[:, :, i0:i1].reshape(n, out_c, -1)
                    gw += np.tensordot(gband, xcol, axes=([0, 2], [0, 2]))
            _accumulate(w, gw.reshape(out_c, in_c, f, f))
        if b is not None and b.requires_grad:
            _accumulate(b, gy.sum(axis=(0, 2, 3)))

    return _result("conv2d_dilated", inputs, y, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(gy: np.ndarray) -> None:
        _accumulate(x, gy * mask)

    return _result("relu", (x,), y, backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer, updated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train", momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Train mode uses batch statistics (biased variance) and updates ``state``
    with exponential momentum; infer mode reads ``state`` and leaves it
    untouched.
    """
    _require_nchw(x, "batch_norm input x")
    n, c, h, w = x.shape
    for name, v in (("gamma", gamma), ("beta", beta)):
        if v.data.ndim != 1 or v.shape[0] != c:
            raise ValueError(f"{name} must have shape ({c},), got {v.shape}")
    if state.mean.shape != (c,) or state.var.shape != (c,):
        raise ValueError(f"running stats must have shape ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    count = n * h * w
    if count == 0:
        raise ValueError("batch_norm requires at least one element per channel")

    dt = x.dtype
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean[:] = momentum * state.mean + (1.0 - momentum) * mu.astype(state.mean.dtype)
        state.var[:] = momentum * state.var + (1.0 - momentum) * var.astype(state.var.dtype)
    else:
        mu = state.mean.astype(dt)
        var = state.var.astype(dt)

    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(gy: np.ndarray) -> None:
        if beta.requires_grad:
            _accumulate(beta, gy.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = gy * gamma.data.reshape(1, c, 1, 1)
            if mode == "train":
                m_g = gs.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                m_gx = (gs * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = inv_std.reshape(1, c, 1, 1) * (gs - m_g - xhat * m_gx)
            else:
                gx = gs * inv_std.reshape(1, c, 1, 1)
            _accumulate(x, gx)

    return _result("batch_norm", (x, gamma, beta), y.astype(dt), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis, a's channels first."""
    _require_nchw(a, "concat input a")
    _require_nchw(b, "concat input b")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(
            f"concat inputs must agree in batch/height/width, got {a.shape} vs {b.shape}")
    y = np.concatenate([a.data, b.data], axis=1)

    def backward(gy: np.ndarray) -> None:
        _accumulate(a, gy[:, :ca])
        _accumulate(b, gy[:, ca:])

    return _result("concat_channels", (a, b), y, backward)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route gradient to the first element
    in row-major window order."""
    _require_nchw(x, "max_pool input x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(gy: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gwin = np.zeros_like(windows, dtype=gy.dtype)
        np.put_along_axis(gwin, arg[..., None], gy[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _result("max_pool_2x2", (x,), y, backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    y = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(gy: np.ndarray) -> None:
        g = (2.0 / count) * diff * gy
        _accumulate(pred, g)
        if target.requires_grad:
            _accumulate(target, -g)

    return _result("mse_loss", (pred, target), y, backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    y = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(gy: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(gy, x.shape))

    return _result("sum", (x,), y, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def backward(gy: np.ndarray) -> None:
        _accumulate(a, gy)
        _accumulate(b, gy)

    return _result("add", (a, b), y, backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    cval = x.dtype.type(c)
    y = x.data * cval

    def backward(gy: np.ndarray) -> None:
        _accumulate(x, gy * cval)

    return _result("scale", (x,), y, backward)


def affine_channels(x: Tensor, mul: float | np.ndarray, shift: float | np.ndarray) -> Tensor:
    """Fixed per-channel affine map ``x * mul + shift`` (constants, no grads)."""
    _require_nchw(x, "affine input x")
    c = x.shape[1]
    mul_arr = np.broadcast_to(np.asarray(mul, dtype=x.dtype), (c,)).reshape(1, c, 1, 1)
    shift_arr = np.broadcast_to(np.asarray(shift, dtype=x.dtype), (c,)).reshape(1, c, 1, 1)
    y = x.data * mul_arr + shift_arr

    def backward(gy: np.ndarray) -> None:
        _accumulate(x, gy * mul_arr)

    return _result("affine_channels", (x,), y, backward)


class GradCheckFailure(RuntimeError):
    """Raised when the forward pass produces non-finite values; carries the
    name of the first offending op."""


def _check_finite(tape: Tape) -> None:
    for node in tape._nodes:
        if not np.all(np.isfinite(node.output.data)):
            raise GradCheckFailure(f"non-finite output from op {node.op!r}")


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    Runs in float64 regardless of the inputs' dtype. Returns the worst
    relative error over all checked elements, falling back to absolute error
    where the scale is below 1e-8. ``max_elements`` caps the number of
    coordinates checked per input (random without replacement, seeded).
    """
    wide = [Tensor(t.data.astype(np.float64), requires_grad=True, name=t.name) for t in inputs]
    with Tape() as tape:
        out = f(*wide)
        _check_finite(tape)
        if out.data.ndim != 0:
            raise ValueError("grad_check requires f to return a scalar tensor")
        tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wide]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(wide, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*wide).data)
            flat[i] = orig - step
            fm = float(f(*wide).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(g.reshape(-1)[i])
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
            worst = max(worst, err)
    return worst
