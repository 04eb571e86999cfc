"""Versioned binary containers: magic, JSON header, little-endian float32 payload.

Layout::

    magic (8 bytes) | header length (uint64 LE) | header JSON (utf-8) | payload
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"HCGCKPT1"
DEMO_MAGIC = b"HCGDEMO1"


class FormatError(ValueError):
    pass


def pack_arrays(arrays: "OrderedDict[str, np.ndarray]"):
    """Header entries and float32 payload for named arrays."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    return entries, b"".join(chunks)


def unpack_arrays(entries, payload: bytes) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return out


def write_block(path, magic: bytes, header: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    entries, payload = pack_arrays(arrays)
    header = dict(header)
    header["tensors"] = entries
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(payload)


def read_block(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    arrays = unpack_arrays(header["tensors"], data[16 + n :])
    return header, arrays


def save_checkpoint(path, tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    write_block(path, CKPT_MAGIC, {"meta": meta or {}}, tensors)


def load_checkpoint(path):
    header, arrays = read_block(path, CKPT_MAGIC)
    return arrays, header.get("meta", {})
