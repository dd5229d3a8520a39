"""Versioned binary container for named float32 parameter arrays.

Layout (little-endian):
  magic "VDRC" | version u32 | param count u64
  per record: name length u16 | UTF-8 name | rank u8 | dims u32 each | raw f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"VDRC"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ContractError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", f.read(8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = f.read(4 * n)
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
            out[name] = arr
        return out
