"""Flat binary container for named arrays with a JSON index and checksum."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"MTLAUGC1"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict):
    """Write arrays back to back after a JSON index; data region is checksummed."""
    path = Path(path)
    blobs = []
    index = {}
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": arr.dtype.str,
                       "offset": offset, "nbytes": len(buf)}
        blobs.append(buf)
        offset += len(buf)
    data = b"".join(blobs)
    header = json.dumps({
        "arrays": index,
        "meta": meta,
        "checksum": hashlib.sha256(data).hexdigest(),
    }, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(data)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + header_len])
    data = raw[16 + header_len:]
    if hashlib.sha256(data).hexdigest() != header["checksum"]:
        raise IntegrityError(f"{path}: checksum mismatch, container is corrupt")
    arrays = {}
    for name, entry in header["arrays"].items():
        buf = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()
    return arrays, header["meta"]
