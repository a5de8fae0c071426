"""Deterministic binary container for named arrays plus a JSON header.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header
(sorted keys), then each array's row-major bytes in header order.
Writing the same metadata and arrays twice produces byte-identical
files, which npz cannot guarantee (zip members embed timestamps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SEQREC1\n"


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` (insertion order preserved) with ``meta`` to ``path``."""
    entries = []
    buffers = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        buffers.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`save_arrays`."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a seqrec array container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise DataError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return header["meta"], arrays
