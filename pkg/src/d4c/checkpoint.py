"""Binary checkpoint container.

Layout::

    b"D4CCKPT\\0"                 8-byte magic
    uint64 little-endian          length L of the JSON header in bytes
    L bytes of UTF-8 JSON         {"version", "tensors": [...], "meta", "quant"}
    body                          raw little-endian float32 arrays

Each manifest entry is ``{"name", "shape", "dtype": "<f4", "offset",
"nbytes"}`` with ``offset`` counted from the start of the body.  Tensors are
written in manifest order.  JSON keys are sorted so identical content gives
identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"D4CCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
                    quant: dict | None = None) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        b = a.tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": "<f4",
                         "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    header = {"version": VERSION, "tensors": manifest, "meta": meta or {}, "quant": quant or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in chunks:
            f.write(b)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    body = memoryview(raw)[16 + n:]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(body[start:start + nbytes], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header
