"""Image quality metrics, diagnostic display windowing, and dataset-level
evaluation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .physics import CtImage

__all__ = [
    "WindowSpec",
    "WINDOW_PRESETS",
    "MetricsReport",
    "psnr",
    "ssim",
    "apply_window",
    "eval_dataset",
    "write_report_csv",
]


@dataclass(frozen=True)
class WindowSpec:
    """Linear HU-to-display mapping."""

    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


WINDOW_PRESETS = {
    "abdomen": WindowSpec(center=50.0, width=400.0),
    "lung": WindowSpec(center=-600.0, width=1500.0),
}


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``
    (reported as "identical" in CSV output)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", views, kernel)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity with the canonical 11x11 Gaussian window
    (sigma 1.5, K1=0.01, K2=0.03), averaged over valid windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    kernel = _gaussian_window()
    if min(a.shape) < kernel.shape[0]:
        raise ValueError(f"image {a.shape} is smaller than the {kernel.shape[0]}x"
                         f"{kernel.shape[0]} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _window_means(a, kernel)
    mu_b = _window_means(b, kernel)
    var_a = _window_means(a * a, kernel) - mu_a ** 2
    var_b = _window_means(b * b, kernel) - mu_b ** 2
    cov = _window_means(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def apply_window(img: CtImage, win: WindowSpec) -> np.ndarray:
    """Linear HU window to 8-bit grayscale, clamped outside, rounding
    half-up."""
    if img.unit != "HU":
        raise ValueError(f"apply_window expects an HU image, got unit {img.unit!r}")
    lo = win.center - win.width / 2.0
    mapped = (img.grid - lo) / win.width * 255.0
    return np.clip(np.floor(mapped + 0.5), 0, 255).astype(np.uint8)


@dataclass
class MetricsReport:
    """Per-image metrics plus arithmetic-mean aggregates."""

    rows: list[dict]
    missing: list[str]

    @property
    def mean_psnr_pred(self) -> float:
        return float(np.mean([r["psnr_pred"] for r in self.rows]))

    @property
    def mean_ssim_pred(self) -> float:
        return float(np.mean([r["ssim_pred"] for r in self.rows]))

    def mean_row(self) -> dict:
        row = {"filename": "MEAN"}
        for key in ("psnr_lowdose", "ssim_lowdose", "psnr_pred", "ssim_pred"):
            vals = [r[key] for r in self.rows if r[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        return row


def _load_norm(path: Path) -> np.ndarray:
    from .pgm import read_pgm

    return np.clip(read_pgm(path) / 4095.0, 0.0, 1.0)


def eval_dataset(pred_dir: str | Path, ref_dir: str | Path,
                 low_dir: str | Path | None = None) -> MetricsReport:
    """PSNR/SSIM of predictions against references, optionally with the raw
    low-dose baseline column; rows are sorted by filename.

    Files missing their counterpart are listed in ``missing`` and skipped.
    """
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    preds = {p.name: p for p in sorted(pred_dir.glob("*.pgm"))}
    refs = {p.name: p for p in sorted(ref_dir.glob("*.pgm"))}
    lows = {p.name: p for p in sorted(Path(low_dir).glob("*.pgm"))} if low_dir else {}

    names = sorted(set(preds) | set(refs))
    rows = []
    missing = []
    for name in names:
        if name not in preds or name not in refs:
            missing.append(name)
            continue
        if low_dir and name not in lows:
            missing.append(name)
            continue
        pred = _load_norm(preds[name])
        ref = _load_norm(refs[name])
        row = {"filename": name,
               "psnr_pred": psnr(pred, ref), "ssim_pred": ssim(pred, ref),
               "psnr_lowdose": None, "ssim_lowdose": None}
        if low_dir:
            low = _load_norm(lows[name])
            row["psnr_lowdose"] = psnr(low, ref)
            row["ssim_lowdose"] = ssim(low, ref)
        rows.append(row)
    return MetricsReport(rows=rows, missing=missing)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "identical"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report_csv(path: str | Path, report: MetricsReport) -> None:
    fields = ["filename", "psnr_lowdose", "ssim_lowdose", "psnr_pred", "ssim_pred"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in report.rows + [report.mean_row()]:
            writer.writerow([_fmt(row[k]) for k in fields])
