"""Single-file checkpoints: magic, version, config hash, JSON metadata,
then named tensor records (sorted by name, deterministic bytes)."""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import tensorio
from .errors import UsageError

CHECKPOINT_MAGIC = b"SOTR"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, cfg_hash: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    if len(cfg_hash) != 32:
        raise UsageError("config hash must be 32 bytes")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(cfg_hash)
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            tensorio.write_named_tensor(fh, name, tensors[name])
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[bytes, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        cfg_hash = fh.read(32)
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            name, arr = tensorio.read_named_tensor(fh)
            tensors[name] = arr
    return cfg_hash, meta, tensors
