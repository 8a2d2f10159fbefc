"""Binary checkpoint format: named float32 tensors, exact round trip.

Layout (all integers little-endian u32):

    magic "MNAVCKPT" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims[rank] | f32 payload

Tensor order is preserved, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"MNAVCKPT"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # np.ascontiguousarray would promote 0-d arrays to 1-d and lose the
        # rank; plain asarray keeps it (0-d arrays are always contiguous)
        data = np.asarray(arr, dtype="<f4")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, "
                              f"expected {VERSION}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: undecodable tensor name") from e
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        rank = r.u32()
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r}")
        dims = tuple(r.u32() for _ in range(rank))
        n_elems = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * n_elems)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return out
