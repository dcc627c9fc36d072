"""Dataset preparation, Adam optimization with the two-stage schedule, and
checkpointing."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .container import write_container, read_container, ContainerError
from .network import NetParams, build_arch, forward, init_glorot
from .perceptual import LossConfig, WeightStore, combined_loss
from .physics import CtImage

__all__ = [
    "PIXEL_PEAK",
    "TrainConfig",
    "PatchSet",
    "Checkpoint",
    "AdamState",
    "TrainingDiverged",
    "normalize",
    "denormalize",
    "split_dataset",
    "patch_positions",
    "extract_patches",
    "build_patchset",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

PIXEL_PEAK = 4095.0


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last complete-epoch checkpoint survives."""


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol: two Adam stages over 40x40 patch pairs."""

    variant: str = "drl-e"
    n_filters: int = 64
    patch: int = 40
    stride: int = 20
    epochs: tuple[int, int] = (20, 20)
    lrs: tuple[float, float] = (1e-3, 1e-4)
    batch: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1 or self.batch < 1:
            raise ValueError("patch, stride and batch must be positive")
        if any(e <= 0 for e in self.epochs):
            raise ValueError("both stage epoch counts must be positive")
        if any(lr <= 0 for lr in self.lrs):
            raise ValueError("learning rates must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps({
            "variant": self.variant, "n_filters": self.n_filters, "patch": self.patch,
            "stride": self.stride, "epochs": list(self.epochs), "lrs": list(self.lrs),
            "batch": self.batch, "seed": self.seed,
            "lambda_mse": self.loss.lambda_mse, "lambda_p": self.loss.lambda_p,
            "adapter": self.loss.adapter.name,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def stage_of_epoch(self, epoch: int) -> int:
        """1-based stage for a 1-based epoch number."""
        return 1 if epoch <= self.epochs[0] else 2

    def lr_of_epoch(self, epoch: int) -> float:
        return self.lrs[self.stage_of_epoch(epoch) - 1]

    @property
    def total_epochs(self) -> int:
        return self.epochs[0] + self.epochs[1]


def normalize(img: CtImage) -> Tensor:
    """Stored pixels divided by 4095, as a (1, 1, h, w) float32 tensor.

    Out-of-range pixels are clamped, with a warning counting them.
    """
    if img.unit != "pixel":
        raise ValueError(f"normalize expects a pixel image, got unit {img.unit!r}")
    grid = img.grid
    out_of_range = int(((grid < 0) | (grid > PIXEL_PEAK)).sum())
    if out_of_range:
        warnings.warn(f"{out_of_range} pixels outside [0, {PIXEL_PEAK:.0f}] were clamped",
                      stacklevel=2)
        grid = np.clip(grid, 0.0, PIXEL_PEAK)
    data = (grid / PIXEL_PEAK).astype(np.float32)
    return Tensor(data[None, None, :, :])


def denormalize(x: Tensor | np.ndarray, template: CtImage | None = None) -> CtImage:
    """Exact inverse map back to stored pixel values."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    grid = np.asarray(data, dtype=np.float64).reshape(data.shape[-2:]) * PIXEL_PEAK
    if template is not None:
        return template.with_grid(grid, unit="pixel")
    return CtImage(grid, unit="pixel")


def split_dataset(images: list) -> tuple[list, list]:
    """First ceil(0.7 N) items train, the rest test, order preserved."""
    n = len(images)
    if n < 2:
        raise ValueError("need at least two images to split")
    n_train = -(-7 * n // 10)  # ceil(0.7 n) exactly, in integer arithmetic
    if n_train >= n:
        raise ValueError(f"split of {n} images leaves an empty test set")
    return list(images[:n_train]), list(images[n_train:])


def patch_positions(dim: int, patch: int, stride: int) -> list[int]:
    """Grid positions 0, stride, ... plus a final flush position at
    dim - patch when the grid does not land there."""
    if patch > dim:
        raise ValueError(f"patch {patch} exceeds dimension {dim}")
    last = dim - patch
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return pos


@dataclass
class PatchSet:
    """Aligned low-dose / normal-dose patch pairs in [0, 1].

    ``provenance[k]`` is ``(image_index, y, x)`` of patch k in its source.
    """

    low: np.ndarray
    normal: np.ndarray
    provenance: list[tuple[int, int, int]]

    def __post_init__(self):
        if self.low.shape != self.normal.shape:
            raise ValueError("low and normal patch stacks must have identical shapes")
        if self.low.ndim != 4 or self.low.shape[1] != 1:
            raise ValueError("patch stacks must be (k, 1, patch, patch)")
        if len(self.provenance) != self.low.shape[0]:
            raise ValueError("provenance must list one entry per patch")

    def __len__(self) -> int:
        return self.low.shape[0]


def extract_patches(low: np.ndarray, normal: np.ndarray, patch: int = 40,
                    stride: int = 20, image_index: int = 0) -> PatchSet:
    """Overlapping patch pairs from one aligned [0, 1] image pair."""
    low = np.asarray(low, dtype=np.float32)
    normal = np.asarray(normal, dtype=np.float32)
    if low.shape != normal.shape or low.ndim != 2:
        raise ValueError("expected two aligned 2-D images")
    ys = patch_positions(low.shape[0], patch, stride)
    xs = patch_positions(low.shape[1], patch, stride)
    lows, normals, prov = [], [], []
    for y in ys:
        for x in xs:
            lows.append(low[y:y + patch, x:x + patch])
            normals.append(normal[y:y + patch, x:x + patch])
            prov.append((image_index, y, x))
    return PatchSet(np.stack(lows)[:, None], np.stack(normals)[:, None], prov)


def build_patchset(pairs: list[tuple[np.ndarray, np.ndarray]], patch: int = 40,
                   stride: int = 20) -> PatchSet:
    """Concatenate per-image patch sets, indexing provenance by pair order."""
    parts = [extract_patches(lo, nd, patch, stride, image_index=i)
             for i, (lo, nd) in enumerate(pairs)]
    return PatchSet(
        np.concatenate([p.low for p in parts]),
        np.concatenate([p.normal for p in parts]),
        [pv for p in parts for pv in p.provenance],
    )


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: NetParams) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.tensors.items()})


def adam_step(params: NetParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update in place; missing gradients are
    treated as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, tensor in params.tensors.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        if state.m[name].shape != tensor.data.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)


@dataclass
class Checkpoint:
    """Everything needed to resume: parameters, BN stats, Adam moments,
    schedule position, and the config fingerprint."""

    config: TrainConfig
    params: NetParams
    adam: AdamState
    epoch: int = 0

    @property
    def stage(self) -> int:
        return self.config.stage_of_epoch(max(self.epoch, 1))


def _fingerprint_tensor(fp_hex: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(fp_hex), dtype=np.uint8).astype(np.float32)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in ckpt.params.tensors.items():
        tensors[name] = t.data
        tensors[f"adam.m.{name}"] = ckpt.adam.m[name]
        tensors[f"adam.v.{name}"] = ckpt.adam.v[name]
    for layer, st in ckpt.params.bn.items():
        tensors[f"bn.{layer}.mean"] = st.mean
        tensors[f"bn.{layer}.var"] = st.var
    cfg = ckpt.config
    tensors["meta.step"] = np.array([ckpt.adam.step], dtype=np.float32)
    tensors["meta.epoch"] = np.array([ckpt.epoch], dtype=np.float32)
    tensors["meta.stage"] = np.array([ckpt.stage], dtype=np.float32)
    tensors["meta.variant"] = np.array([1.0 if cfg.variant == "drl-e" else 0.0], dtype=np.float32)
    tensors["meta.n_filters"] = np.array([cfg.n_filters], dtype=np.float32)
    tensors["meta.fingerprint"] = _fingerprint_tensor(cfg.fingerprint())
    write_container(path, tensors)


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> Checkpoint:
    """Load a checkpoint; when a config is supplied its fingerprint must
    match the stored one (resume contract)."""
    tensors = read_container(path)

    def need(name: str) -> np.ndarray:
        if name not in tensors:
            raise ContainerError(f"{path}: missing tensor {name!r}")
        return tensors[name]

    variant = "drl-e" if need("meta.variant")[0] > 0.5 else "drl"
    n_filters = int(round(float(need("meta.n_filters")[0])))
    arch = build_arch(variant, n_filters)
    if config is None:
        config = TrainConfig(variant=variant, n_filters=n_filters)
    else:
        stored = need("meta.fingerprint").astype(np.uint8).tobytes().hex()
        if stored != config.fingerprint():
            raise ContainerError(
                f"{path}: checkpoint fingerprint {stored[:12]}... does not match the "
                f"supplied config ({config.fingerprint()[:12]}...)")

    params = init_glorot(arch, seed=0)
    adam = AdamState.fresh(params)
    for name, t in params.tensors.items():
        stored_t = need(name)
        if stored_t.shape != t.data.shape:
            raise ContainerError(
                f"{path}: tensor {name!r} has shape {stored_t.shape}, "
                f"expected {t.data.shape}")
        t.data = stored_t.copy()
        adam.m[name] = need(f"adam.m.{name}").copy()
        adam.v[name] = need(f"adam.v.{name}").copy()
        if adam.m[name].shape != t.data.shape or adam.v[name].shape != t.data.shape:
            raise ContainerError(f"{path}: optimizer moment shape mismatch for {name!r}")
    for layer, st in params.bn.items():
        st.mean = need(f"bn.{layer}.mean").copy()
        st.var = need(f"bn.{layer}.var").copy()
    adam.step = int(round(float(need("meta.step")[0])))
    epoch = int(round(float(need("meta.epoch")[0])))
    return Checkpoint(config=config, params=params, adam=adam, epoch=epoch)


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(count)


def train(cfg: TrainConfig, data: PatchSet, out_dir: str | Path,
          store: WeightStore | None = None, resume: str | Path | None = None,
          stop_after: int | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the two-stage schedule, checkpointing every epoch.

    Per-epoch shuffling is seeded by (seed, epoch), so a resumed run
    reproduces an uninterrupted one bit for bit (single-threaded). The loss
    log is appended to ``loss_log.csv`` with the weighted terms separated.
    Returns the final checkpoint and the log rows.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if cfg.loss.lambda_p > 0 and store is None:
        raise ValueError("perceptual loss requires extractor weights")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arch = build_arch(cfg.variant, cfg.n_filters)

    if resume is not None:
        ckpt = load_checkpoint(resume, config=cfg)
        start_epoch = ckpt.epoch + 1
        log_mode = "a"
    else:
        params = init_glorot(arch, seed=cfg.seed)
        ckpt = Checkpoint(config=cfg, params=params, adam=AdamState.fresh(params))
        start_epoch = 1
        log_mode = "w"

    last_epoch = cfg.total_epochs if stop_after is None else min(stop_after, cfg.total_epochs)
    rows: list[dict] = []
    log_path = out_dir / "loss_log.csv"
    with open(log_path, log_mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "epoch", "stage", "lr", "mse_term", "perceptual_term", "total"])
        if log_mode == "w":
            writer.writeheader()
        for epoch in range(start_epoch, last_epoch + 1):
            lr = cfg.lr_of_epoch(epoch)
            order = _epoch_order(cfg.seed, epoch, len(data))
            sums = np.zeros(3, dtype=np.float64)
            n_steps = 0
            for lo in range(0, len(order), cfg.batch):
                idx = order[lo:lo + cfg.batch]
                xb = Tensor(data.low[idx])
                yb = Tensor(data.normal[idx])
                with Tape() as tape:
                    pred = forward(arch, ckpt.params, xb, mode="train")
                    loss, mse_term, p_term = combined_loss(pred, yb, cfg.loss, store)
                total = loss.item()
                if not np.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; last good checkpoint is "
                        f"epoch {epoch - 1}")
                tape.backward(loss)
                adam_step(ckpt.params, ckpt.adam, lr)
                sums += (mse_term, p_term, total)
                n_steps += 1
            ckpt.epoch = epoch
            row = {
                "epoch": epoch,
                "stage": cfg.stage_of_epoch(epoch),
                "lr": lr,
                "mse_term": sums[0] / n_steps,
                "perceptual_term": sums[1] / n_steps,
                "total": sums[2] / n_steps,
            }
            rows.append(row)
            writer.writerow(row)
            fh.flush()
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.ldws", ckpt)
    save_checkpoint(out_dir / "final.ldws", ckpt)
    return ckpt, rows
