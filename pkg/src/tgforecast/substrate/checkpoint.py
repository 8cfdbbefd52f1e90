"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     8 bytes   b"TGFCKPT\\0"
    version   uint32
    hlen      uint32    length of the JSON header in bytes
    header    hlen bytes UTF-8 JSON: {"config_hash", "config", "blocks": [{"name", "shape", "offset"}]}
    payload   concatenated float64 '<f8' values, blocks in header order

Blocks are written in sorted-name order; nothing time-dependent is stored,
so identical parameters give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TGFCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config_hash: str, config: dict | None = None) -> None:
    names = sorted(arrays)
    blocks = []
    offset = 0
    for name in names:
        a = np.asarray(arrays[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = json.dumps(
        {"config_hash": config_hash, "config": config or {}, "blocks": blocks}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str, dict]:
    """Returns ``(arrays, config_hash, config)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"], dtype=np.int64))
        start = blk["offset"]
        if start + n > payload.size:
            raise CheckpointError(f"{path}: truncated payload at block {blk['name']!r}")
        arrays[blk["name"]] = payload[start : start + n].reshape(blk["shape"]).astype(np.float64)
    return arrays, header["config_hash"], header.get("config", {})
