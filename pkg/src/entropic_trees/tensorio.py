"""Single-file tensor container.

Layout: an unsigned little-endian 64-bit header length, a UTF-8 JSON header,
then the raw array bytes.  The header lists every tensor with shape, dtype
and byte offset into the data section, plus a free-form metadata object.
Arrays are C-order little-endian; only f64 and i64 are allowed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_NAMES = {np.dtype("<f8"): "f64", np.dtype("<i8"): "i64"}

MAGIC_META_KEY = "format"
FORMAT_NAME = "entropic-trees-tensors-v1"


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    name = _NAMES.get(dt)
    if name is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float64 or int64")
    return name


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write tensors plus metadata; tensor order is name-sorted."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dname = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dname], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dname, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        MAGIC_META_KEY: FORMAT_NAME,
        "meta": meta or {},
        "tensors": entries,
    }
    hraw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hraw)))
        fh.write(hraw)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (tensors, metadata)."""
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise ValueError("truncated container header")
        (hlen,) = struct.unpack("<Q", prefix)
        hraw = fh.read(hlen)
        if len(hraw) != hlen:
            raise ValueError("truncated container header")
        header = json.loads(hraw.decode())
        if header.get(MAGIC_META_KEY) != FORMAT_NAME:
            raise ValueError("not a tensor container")
        data = fh.read()
    out: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        dt = _DTYPES.get(ent["dtype"])
        if dt is None:
            raise ValueError(f"unknown dtype {ent['dtype']!r}")
        shape = tuple(ent["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = ent["offset"]
        stop = start + count * dt.itemsize
        if stop > len(data):
            raise ValueError(f"tensor {ent['name']!r} overruns the data section")
        arr = np.frombuffer(data[start:stop], dtype=dt).reshape(shape)
        out[ent["name"]] = arr.copy()
    return out, header.get("meta", {})
