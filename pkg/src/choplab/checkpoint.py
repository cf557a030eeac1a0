"""Versioned single-file container for named float64 tensors.

Layout::

    b"CHOPLAB\\0"                magic
    uint32 LE                    format version
    uint64 LE                    header length n
    n bytes                      UTF-8 JSON header (sorted keys)
    tensor bytes                 float64 LE, row-major, in header order

The header holds ``kind``, free-form ``meta`` and, per tensor, its name,
shape and byte offset into the data block. Output is byte-identical for
identical inputs.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CHOPLAB\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; raises :class:`CheckpointError` on a bad file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (n,) = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20:20 + n])
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, got {header['kind']!r}")
    base = 20 + n
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, tensors
