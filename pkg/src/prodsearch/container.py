"""Named-array container: magic, JSON header, little-endian payload.

Layout::

    b"PSARRAY1"                      8 bytes
    header length                    uint64 little-endian
    header                           UTF-8 JSON: {"arrays": [...], "meta": {...}}
    payload                          concatenated raw arrays

Each array entry records ``name``, ``dtype`` (``"<f4"`` or ``"<i8"``),
``shape``, ``offset`` (relative to payload start) and ``nbytes``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PSARRAY1"
_DTYPES = {"f": "<f4", "i": "<i8", "u": "<i8", "b": "<i8"}
_NATIVE = {"<f4": np.float32, "<i8": np.int64}


class ContainerError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPES.get(arr.dtype.kind)
        if code is None:
            raise ContainerError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ContainerError(f"{path}: not an array container (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=start)
        out[e["name"]] = np.array(arr.reshape(e["shape"]), dtype=_NATIVE[e["dtype"]])
    return out, header["meta"]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
