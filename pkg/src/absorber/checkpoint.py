"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"ABSB"                 magic
    u32                     format version (1)
    u64                     header length in bytes
    header                  UTF-8 JSON: {"config", "provenance", "tensors"}
    payload                 packed f32 tensors in header order

``tensors`` maps name -> {"dtype": "f32", "shape", "offset", "length"} where
offset/length are byte ranges relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, tensor_shapes

MAGIC = b"ABSB"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


def build_header(weights: ModelWeights, provenance: dict | None = None) -> dict:
    tensors = {}
    offset = 0
    for name, shape in tensor_shapes(weights.config).items():
        length = int(np.prod(shape)) * 4
        tensors[name] = {"dtype": "f32", "shape": list(shape), "offset": offset, "length": length}
        offset += length
    return {"config": weights.config.to_dict(), "provenance": dict(provenance or {}), "tensors": tensors}


def save_checkpoint(weights: ModelWeights, path: str | Path, provenance: dict | None = None) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    header = json.dumps(build_header(weights, provenance), sort_keys=False).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            for name in tensor_shapes(weights.config):
                fh.write(np.ascontiguousarray(weights.tensors[name], dtype="<f4").tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def read_header(path: str | Path) -> tuple[dict, int]:
    """Return (header, payload start offset) after validating magic and version."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated before header")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
        raw = fh.read(header_len)
    if len(raw) != header_len:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} of {header_len} bytes)")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    for key in ("config", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing '{key}'")
    return header, _PREFIX.size + header_len


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, ModelConfig, dict]:
    """Returns (weights, config, provenance)."""
    path = Path(path)
    header, payload_start = read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    expected = tensor_shapes(config)
    entries = header["tensors"]
    if list(entries) != list(expected):
        raise CheckpointError(f"{path}: tensor table does not match config")
    payload = path.read_bytes()[payload_start:]
    cursor = 0
    tensors = {}
    for name, entry in entries.items():
        shape = tuple(entry.get("shape", ()))
        if entry.get("dtype") != "f32" or shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name} has dtype {entry.get('dtype')} shape {shape}")
        offset, length = entry.get("offset"), entry.get("length")
        if offset != cursor or length != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{path}: tensor {name} offsets are not contiguous")
        if offset + length > len(payload):
            raise CheckpointError(f"{path}: truncated payload in tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=offset).reshape(shape).astype(
            np.float32)
        cursor += length
    if cursor != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - cursor} trailing bytes after payload")
    return ModelWeights(config, tensors), config, header.get("provenance", {})
