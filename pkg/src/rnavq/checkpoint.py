"""Binary checkpoint files.

Layout::

    b"RVQK"                       4-byte magic
    uint32 LE                     format version
    uint64 LE                     manifest length in bytes
    manifest                      UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, offset}]}
    payload                       little-endian float64, tensors back to back

``offset`` counts float64 elements from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVQK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"refusing to save non-finite values in {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for e in entries:
            fh.write(np.ascontiguousarray(tensors[e["name"]], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        manifest = json.loads(raw[16:16 + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: unreadable manifest") from None
    body = raw[16 + mlen:]
    need = 8 * sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["tensors"])
    if len(body) != need:
        raise CheckpointError(f"{path}: payload has {len(body)} bytes, manifest needs {need}")
    payload = np.frombuffer(body, dtype="<f8")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = payload[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
    return tensors, manifest["meta"]
