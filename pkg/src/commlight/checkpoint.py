"""Checkpoint files: a JSON manifest plus a raw little-endian float64 payload.

Layout: 8-byte little-endian unsigned manifest length, the manifest
JSON (utf-8), then the payload. The manifest records format version,
config hash, episode counters, and a (name, shape, byte offset) table;
loading validates every shape against the constructed networks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .diffcore import ParameterSet, ShapeMismatch

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint",
           "load_checkpoint", "read_manifest", "config_hash"]

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, params: ParameterSet, *, config: dict,
                    episode: int = 0, env_steps: int = 0,
                    extra: dict | None = None) -> None:
    path = Path(path)
    table = []
    offset = 0
    chunks = []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "episode": episode,
        "env_steps": env_steps,
        "tensors": table,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", header)
        blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(blob)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path: str | Path, params: ParameterSet) -> dict:
    """Load tensor values into `params` in place; returns the manifest.

    Refuses on version mismatch, unknown/missing names, or any shape
    that disagrees with the constructed networks.
    """
    path = Path(path)
    manifest = read_manifest(path)
    table = {row["name"]: row for row in manifest["tensors"]}
    if set(table) != set(params.names()):
        missing = set(params.names()) - set(table)
        surplus = set(table) - set(params.names())
        raise CheckpointError(
            f"{path}: tensor names disagree (missing={sorted(missing)}, "
            f"surplus={sorted(surplus)})")
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        fh.seek(8 + n)
        payload = fh.read()
    for name, t in params.tensors.items():
        row = table[name]
        if tuple(row["shape"]) != t.shape:
            raise ShapeMismatch(
                f"{path}: '{name}' has shape {row['shape']}, expected {list(t.shape)}")
        count = t.size
        start = row["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        t.data[...] = arr.reshape(t.shape)
    return manifest
