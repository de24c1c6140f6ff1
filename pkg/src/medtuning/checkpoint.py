"""Binary persistence for named tensors and synthetic volume sets.

Checkpoint layout (little-endian throughout):
    magic "MTCK" | u32 version | u32 record count | records...
    record: u32 name length | name utf-8 | u8 dtype tag (0 = float32)
            | u8 rank | rank x u64 dims | raw float32 data

Volume-set cache layout:
    magic "MTVD" | u32 version | u32 sample count | samples...
    sample: 3 x u64 (D, H, W) | D*H*W float32 intensities | D*H*W u8 labels

Writes go to a temp file that is atomically renamed, so a failed save
never leaves a partial artifact; loads parse the whole file before any
state is applied.
"""

from __future__ import annotations

import os
import struct
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError

CKPT_MAGIC = b"MTCK"
DATA_MAGIC = b"MTVD"
VERSION = 1
_F32 = 0


def _atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_checkpoint(path: str, table: dict[str, np.ndarray] | Iterable) -> None:
    """Write a name -> float32 tensor table."""
    items = table.items() if isinstance(table, dict) else list(table)
    out = [CKPT_MAGIC, struct.pack("<I", VERSION)]
    records = []
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        raw = name.encode("utf-8")
        rec = [struct.pack("<I", len(raw)), raw,
               struct.pack("<BB", _F32, arr.ndim),
               struct.pack(f"<{arr.ndim}Q", *arr.shape),
               arr.tobytes()]
        records.append(b"".join(rec))
    out.append(struct.pack("<I", len(records)))
    out.extend(records)
    _atomic_write(path, b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated {self.what} file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64s(self, n: int) -> tuple[int, ...]:
        return struct.unpack(f"<{n}Q", self.take(8 * n))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Parse a checkpoint into a name -> float32 array table."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, "checkpoint")
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32()
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag != _F32:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dims = r.u64s(rank)
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        table[name] = np.ascontiguousarray(data)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return table


def apply_checkpoint(graph, table: dict[str, np.ndarray]) -> None:
    """Strictly load a full table into a model (names and shapes must match)."""
    names = {}
    for name, _, t in graph.named_params():
        names[name] = t
    unknown = sorted(set(table) - set(names))
    if unknown:
        raise ConfigError(f"checkpoint holds unknown tensors: {', '.join(unknown)}")
    missing = sorted(set(names) - set(table))
    if missing:
        raise ConfigError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for name, t in names.items():
        src = table[name]
        if tuple(src.shape) != t.shape:
            raise ConfigError(f"tensor {name!r}: checkpoint shape {src.shape} vs "
                              f"model shape {t.shape}")
    for name, t in names.items():
        t.data = np.ascontiguousarray(table[name], dtype=np.float32)


def graph_table(graph) -> dict[str, np.ndarray]:
    """Snapshot a model's named tensors (copies)."""
    return {name: t.data.copy() for name, _, t in graph.named_params()}


def save_volume_set(path: str, samples: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """Cache (volume [1,D,H,W] float32, labels [D,H,W] u8) pairs."""
    out = [DATA_MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(samples))]
    for vol, lab in samples:
        vol = np.ascontiguousarray(vol, dtype=np.float32)
        lab = np.ascontiguousarray(lab, dtype=np.uint8)
        d, h, w = vol.shape[-3:]
        if lab.shape != (d, h, w):
            raise FormatError(f"labels {lab.shape} do not match volume {(d, h, w)}")
        out.append(struct.pack("<3Q", d, h, w))
        out.append(vol.tobytes())
        out.append(lab.tobytes())
    _atomic_write(path, b"".join(out))


def load_volume_set(path: str) -> list[tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, "volume set")
    if r.take(4) != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic, not a volume set")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported volume-set version {version}")
    count = r.u32()
    samples = []
    for _ in range(count):
        d, h, w = r.u64s(3)
        n = d * h * w
        vol = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(1, d, h, w).copy()
        lab = np.frombuffer(r.take(n), dtype=np.uint8).reshape(d, h, w).copy()
        samples.append((vol, lab))
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return samples
