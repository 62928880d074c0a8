"""Binary checkpoint format.

Layout::

    b"RSTT" | u32 version | u32 header length | JSON header | raw tensor blobs

The header lists every tensor (name, shape, dtype, byte offset relative to
the start of the blob area) plus free-form metadata (model config,
iteration, optimizer step). Blobs are little-endian float32, or float64
for runs done in 64-bit mode.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"RSTT"
VERSION = 1
_ALLOWED = {"<f4", "<f8"}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    """Write ``tensors`` (name -> array or Tensor) atomically to ``path``."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        dt = arr.dtype.newbyteorder("<")
        if dt.str not in _ALLOWED:
            raise ContractError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not an RSTT checkpoint")
    if len(raw) < 12:
        raise ContractError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: corrupt header") from exc
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] not in _ALLOWED:
            raise ContractError(f"{path}: tensor {e['name']!r} has dtype {e['dtype']}")
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ContractError(f"{path}: tensor {e['name']!r} runs past end of file")
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(tensors=tensors, meta=header.get("meta", {}), version=version)
