"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IVTL"                      magic
    uint32  version (= 1)
    uint64  manifest length in bytes
    bytes   UTF-8 JSON manifest
    bytes   float32 parameter data, concatenated in manifest order

The manifest is ``{"config": {...}, "params": [{"name", "shape", "offset",
"nbytes"}, ...], "meta": {...}}`` with offsets relative to the start of the
data section. JSON is written with sorted keys and no whitespace so identical
parameters always produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .substrate import Tensor

MAGIC = b"IVTL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    pass


def to_bytes(params: Params, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"config": params.cfg.to_dict(), "params": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[Params, dict]:
    if len(buf) < _HEADER.size:
        raise CheckpointFormatError("file too short for header")
    magic, version, mlen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    start = _HEADER.size
    if start + mlen > len(buf):
        raise CheckpointFormatError("truncated manifest")
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
        cfg = ModelConfig(**manifest["config"])
        entries = manifest["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad manifest: {exc}") from exc
    data_start = start + mlen
    expected = param_shapes(cfg)
    if [e["name"] for e in entries] != list(expected):
        raise CheckpointFormatError("parameter names do not match the model config")
    tensors = OrderedDict()
    end = data_start
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointFormatError(f"{e['name']}: shape {shape} != {expected[e['name']]}")
        nbytes = int(np.prod(shape)) * 4
        if e["nbytes"] != nbytes:
            raise CheckpointFormatError(f"{e['name']}: byte count mismatch")
        lo = data_start + e["offset"]
        if lo + nbytes > len(buf):
            raise CheckpointFormatError("truncated parameter data")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=lo).astype(np.float32).reshape(shape)
        tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        end = max(end, lo + nbytes)
    if end != len(buf):
        raise CheckpointFormatError("trailing bytes after parameter data")
    return Params(cfg, tensors), manifest.get("meta", {})


def save_checkpoint(params: Params, path, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(params, meta))
    os.replace(tmp, path)


def load_checkpoint(path) -> Params:
    return load_checkpoint_with_meta(path)[0]


def load_checkpoint_with_meta(path) -> tuple[Params, dict]:
    return from_bytes(Path(path).read_bytes())
