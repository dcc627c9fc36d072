"""Shared binary tensor container.

Layout (all integers and floats little-endian):
magic ``LDWS`` | version u32 = 1 | tensor count u32, then per tensor:
name length u32 | UTF-8 name | ndim u32 | dims u32 x ndim | float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container"]

MAGIC = b"LDWS"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors; names must be unique (dict enforces)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container, validating structure exactly; trailing bytes are an
    error."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), str(path))
    if rd.take(4, "magic") != MAGIC:
        raise ContainerError(f"{path}: unrecognized container (bad magic)")
    version = rd.u32("version")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    count = rd.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = rd.u32(f"name length of tensor {i}")
        name = rd.take(name_len, f"name of tensor {i}").decode("utf-8")
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        ndim = rd.u32(f"ndim of {name!r}")
        dims = struct.unpack(f"<{ndim}I", rd.take(4 * ndim, f"dims of {name!r}"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        raw = rd.take(4 * n_elem, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if rd.pos != len(rd.buf):
        raise ContainerError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes after last tensor")
    return out
