"""16-bit binary PGM (P5, maxval 65535) slice I/O with JSON sidecars.

PGM carries only the sample grid; rescale slope/intercept and voxel size
travel in a ``<name>.json`` sidecar next to each slice.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .physics import CtImage

__all__ = ["read_pgm", "write_pgm", "read_slice", "write_slice", "sidecar_path"]

MAXVAL = 65535


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """Write a 2-D array as 16-bit big-endian P5, clipping to [0, 65535]."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"PGM grid must be 2-D, got shape {arr.shape}")
    data = np.clip(np.rint(arr), 0, MAXVAL).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("unexpected end of PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM; 16-bit samples are big-endian per the PGM spec."""
    with open(path, "rb") as fh:
        if _read_header_token(fh) != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        w = int(_read_header_token(fh))
        h = int(_read_header_token(fh))
        maxval = int(_read_header_token(fh))
        if maxval <= 0 or maxval > 65535:
            raise ValueError(f"{path}: invalid maxval {maxval}")
        dtype = ">u2" if maxval > 255 else "u1"
        raw = fh.read(h * w * np.dtype(dtype).itemsize)
        if len(raw) != h * w * np.dtype(dtype).itemsize:
            raise ValueError(f"{path}: truncated pixel data")
        return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.float64)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(Path(path).suffix + ".json")


def write_slice(path: str | Path, img: CtImage, extra: dict | None = None) -> None:
    """Write a pixel-valued slice plus its metadata sidecar."""
    if img.unit != "pixel":
        raise ValueError(f"slices are stored in pixel units, got {img.unit!r}")
    write_pgm(path, img.grid)
    meta = {"slope": img.slope, "intercept": img.intercept, "voxel": img.voxel}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_slice(path: str | Path) -> CtImage:
    """Read a slice; missing sidecars fall back to slope 1 / intercept -1024
    / voxel 1 mm."""
    grid = read_pgm(path)
    meta_path = sidecar_path(path)
    slope, intercept, voxel = 1.0, -1024.0, 1.0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        slope = float(meta.get("slope", slope))
        intercept = float(meta.get("intercept", intercept))
        voxel = float(meta.get("voxel", voxel))
    return CtImage(grid, unit="pixel", slope=slope, intercept=intercept, voxel=voxel)
