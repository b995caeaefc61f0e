"""The single binary container used for checkpoints and corpus frame stores.

Layout::

    b"TSRELAB1"                       8-byte magic
    uint64 little-endian              byte length H of the JSON header
    H bytes of UTF-8 JSON             {"meta": {...}, "arrays": [{"path", "shape", "offset"}]}
    float64 little-endian payload     arrays back to back, ``offset`` counted from payload start

JSON is written with sorted keys and no whitespace, so identical content gives
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TSRELAB1"
_LEN = struct.Struct("<Q")


class ContainerError(ValueError):
    pass


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for path, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        manifest.append({"path": path, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = dumps_json({"meta": dict(meta or {}), "arrays": manifest}).encode()
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise ContainerError("not a TSRELAB1 container (bad magic)")
    (hlen,) = _LEN.unpack_from(blob, 8)
    start = 8 + _LEN.size
    header = json.loads(blob[start:start + hlen].decode())
    payload = memoryview(blob)[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        off = entry["offset"]
        if off + 8 * count > len(payload):
            raise ContainerError(f"array {entry['path']} runs past end of file")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        arrays[entry["path"]] = arr.astype(np.float64).reshape(shape)
    return arrays, header["meta"]


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
         meta: Mapping[str, Any] | None = None) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, p)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())
