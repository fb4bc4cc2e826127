"""Checkpoint directories: ``manifest.json`` plus one raw little-endian blob.

The manifest lists every tensor with its shape, dtype, byte offset and
length, and records the blob length and SHA-256 so truncation or bit rot is
detected on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "relpos-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": BLOB,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "meta": meta or {},
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint {manifest.get('format')!r} version {manifest.get('version')!r};"
            f" expected {FORMAT!r} version {VERSION}"
        )
    return manifest


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise IntegrityError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise IntegrityError("blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=dtype).astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return tensors, manifest["meta"]
