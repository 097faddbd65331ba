"""Binary checkpoint format.

Layout (little-endian)::

    b"SOMN"  u32 version  u32 config_len  config JSON (utf-8)
    u32 n_tensors
    repeated: u16 name_len, name (utf-8), u8 rank, u32 dims[rank], f32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import ModelWeights

MAGIC = b"SOMN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, weights: ModelWeights, cfg: ModelConfig) -> Path:
    path = Path(path)
    blob = cfg.to_json().encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple:
    """``(weights, cfg)``; weights come back as float32."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, clen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        cfg = ModelConfig.from_json(buf[off:off + clen].decode())
        off += clen
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        w = ModelWeights()
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            w[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return w, cfg
