"""Branch checkpoints: magic, config echo, then named little-endian float32 tensors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .. import config as kv
from .model import BranchWeights, ModelConfig

MAGIC = b"TFSRWTS1"


class CheckpointError(ValueError):
    pass


def save_branch(weights: BranchWeights, cfg: ModelConfig, path, extra: str = "") -> None:
    header = f"role={weights.role}\n" + cfg.to_text("model.") + extra
    hb = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hb)), hb, struct.pack("<I", len(weights.params))]
    for name in sorted(weights.params):
        arr = np.ascontiguousarray(weights.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_branch(path, dtype=np.float32) -> tuple[BranchWeights, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a branch checkpoint")
    try:
        (hlen,) = struct.unpack_from("<I", raw, 8)
        pos = 12 + hlen
        header = kv.read_kv(raw[12:pos].decode("utf-8"))
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(dtype)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    cfg = kv.from_kv(ModelConfig, header, "model.")
    return BranchWeights(header["role"], params), cfg, header
