"""Deterministic binary checkpoint container.

Layout: magic, 8-byte little-endian header length, JSON header (sorted
keys), then the raw little-endian bytes of every array in header
order.  The encoding is a pure function of the content: identical
arrays and metadata produce identical files, so fixed-seed training
runs can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"KMCKPT1\n"


def save_checkpoint(path, arrays, meta):
    """arrays: dict name -> ndarray; meta: JSON-serializable dict."""
    blob = checkpoint_bytes(arrays, meta)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    import os
    os.replace(tmp, path)
    return path


def checkpoint_bytes(arrays, meta):
    entries = []
    payload = []
    for name in sorted(arrays):
        # np.ascontiguousarray would widen 0-d arrays to (1,); tobytes()
        # already serializes in C order whatever the memory layout
        arr = np.asarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def load_checkpoint(path):
    """Returns (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[off:off + 8])
    off += 8
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dt.itemsize * count
        arrays[entry["name"]] = np.frombuffer(
            blob[off:off + nbytes], dtype=dt).reshape(entry["shape"]).copy()
        off += nbytes
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes ({len(blob) - off})")
    return arrays, header["meta"]


def config_hash(config_dict):
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode()).hexdigest()[:16]
