"""Single-file checkpoint archive.

Layout (little-endian)::

    b"MFCK"  u32 version  u32 manifest_bytes  manifest (UTF-8 JSON)  payload

The manifest records ``kind``, a config echo, optional extra metadata and,
for each tensor, its name, shape, dtype (always ``"f32"``), byte offset into
the payload and byte length. Tensor names follow the module hierarchy, e.g.
``four.0.audio.qkv.weight`` (stage, block index, path, tensor).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import ValidationError

_MAGIC = b"MFCK"
_HEADER = struct.Struct("<4sII")
VERSION = 1


def save_checkpoint(path, tensors: dict, kind: str, config: dict, extra: dict = None):
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(
            value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value),
            dtype="<f4",
        )
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"kind": kind, "version": VERSION, "config": config,
                           "extra": extra or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValidationError(f"{path}: too short to be a checkpoint")
        magic, version, size = _HEADER.unpack(head)
        if magic != _MAGIC or version != VERSION:
            raise ValidationError(f"{path}: not a v{VERSION} checkpoint")
        return json.loads(fh.read(size).decode())


def load_checkpoint(path):
    """Returns ``(manifest, {name: float32 ndarray})``."""
    raw = Path(path).read_bytes()
    manifest = read_manifest(path)
    start = _HEADER.size + _HEADER.unpack_from(raw)[2]
    tensors = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        buf = raw[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValidationError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return manifest, tensors


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, tensors: dict, prefix: str = ""):
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValidationError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    return module
