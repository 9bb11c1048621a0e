"""Binary checkpoint container.

Layout: the 8-byte magic ``MXSEG001``, a little-endian uint64 byte length,
a UTF-8 JSON header ``{name: {"shape", "dtype", "offset"}}`` and then the raw
little-endian payloads in header order. Offsets count from the first payload
byte. An optional ``"__metadata__"`` entry holds free-form JSON (the model
config, training seed).
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

MAGIC = b"MXSEG001"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
METADATA_KEY = "__metadata__"


def save_checkpoint(path, tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> None:
    header: Dict[str, Any] = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _NAMES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        code = _NAMES[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    if metadata is not None:
        header[METADATA_KEY] = metadata
    encoded = json.dumps(header, sort_keys=False).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + length].decode("utf-8"))
    base = 16 + length
    metadata = header.pop(METADATA_KEY, {})
    tensors = {}
    for name, entry in header.items():
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return tensors, metadata
