"""Checkpoint files: magic, u64 header length, JSON header, little-endian float64 blobs."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"GBCECKP1"


def save_checkpoint(path, tensors: Dict[str, np.ndarray], header: dict) -> None:
    names = list(tensors)
    shapes = [list(np.shape(tensors[n])) for n in names]
    meta = dict(header, names=names, shapes=shapes, dtype="<f8")
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    offset = 16 + n
    tensors = {}
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, header
