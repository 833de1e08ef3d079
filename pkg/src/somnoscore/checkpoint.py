"""Binary checkpoint container for model and optimizer tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"SSCK"
    version u16      currently 1
    config  u32 length + UTF-8 JSON: {"model": {...}, "extra": {...}}
    tensors repeated until EOF:
        name  u16 length + UTF-8 bytes
        ndim  u8
        dims  u32 * ndim
        data  float32 little-endian, row-major

Tensors are stored as float32 regardless of the in-memory training
dtype, so save -> load is bit-identical for float32 parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint

MAGIC = b"SSCK"
VERSION = 1


def write_checkpoint(path, model_config_dict: dict, tensors: dict[str, np.ndarray],
                     extra: dict | None = None) -> None:
    blob = json.dumps({"model": model_config_dict, "extra": extra or {}},
                      sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (model config dict, tensors, extra dict)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpoint(f"checkpoint truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CorruptCheckpoint(f"bad magic in {path}")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        header = json.loads(bytes(take(blob_len, "config")).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"bad config block in {path}") from exc

    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "tensor ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor dims"))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * count, f"tensor {name} data"), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    return header.get("model", {}), tensors, header.get("extra", {})
