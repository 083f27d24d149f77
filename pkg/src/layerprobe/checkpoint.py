"""Binary checkpoint format.

Layout::

    b"LPCKPT01"                      8-byte magic
    uint32 little-endian L           manifest length
    L bytes UTF-8 JSON manifest      spec, tensor table, metadata
    float32 little-endian payloads   contiguous, in manifest order

Tensor offsets in the manifest are relative to the first payload byte.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelSpec

MAGIC = b"LPCKPT01"
_HEADER = len(MAGIC) + 4


def to_bytes(model: Model) -> bytes:
    tensors = []
    payload = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "LPCKPT01",
        "spec": model.spec.to_dict(),
        "tensors": tensors,
        "metadata": model.metadata,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(payload)


def from_bytes(buf: bytes) -> Model:
    if len(buf) < _HEADER:
        raise FormatError(f"checkpoint truncated at byte {len(buf)}: header needs {_HEADER} bytes")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r} at byte 0, expected {MAGIC!r}")
    (length,) = struct.unpack_from("<I", buf, len(MAGIC))
    end = _HEADER + length
    if len(buf) < end:
        raise FormatError(f"manifest declares {length} bytes at offset {_HEADER} but file ends at byte {len(buf)}")
    try:
        manifest = json.loads(buf[_HEADER:end].decode("utf-8"))
        spec = ModelSpec.from_dict(manifest["spec"])
        table = manifest["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest at byte offset {_HEADER}: {exc}") from exc
    params = {}
    cursor = 0
    for entry in table:
        name = entry.get("name", "?")
        shape = tuple(entry.get("shape", ()))
        nbytes = entry.get("nbytes")
        offset = entry.get("offset")
        want = 4 * math.prod(shape)
        if nbytes != want:
            raise FormatError(f"tensor {name!r}: manifest declares {nbytes} bytes, shape {shape} needs {want}")
        if offset != cursor:
            raise FormatError(f"tensor {name!r}: offset {offset} is not contiguous (expected {cursor})")
        start = end + offset
        if start + nbytes > len(buf):
            raise FormatError(
                f"tensor {name!r}: payload at byte {start} needs {nbytes} bytes, file ends at byte {len(buf)}"
            )
        params[name] = np.frombuffer(buf, dtype="<f4", count=want // 4, offset=start).reshape(shape)
        cursor += nbytes
    if end + cursor != len(buf):
        raise FormatError(f"{len(buf) - end - cursor} trailing bytes after last tensor at byte {end + cursor}")
    try:
        return Model(spec, params, manifest.get("metadata"))
    except Exception as exc:
        raise FormatError(f"checkpoint does not describe a valid model: {exc}") from exc


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> Model:
    return from_bytes(Path(path).read_bytes())
