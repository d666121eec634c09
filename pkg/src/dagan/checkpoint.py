"""Binary checkpoint container.

Layout: ``b"DAGN"``, uint32 version, uint64 header length, a UTF-8 JSON
header, then the raw little-endian payload. The header maps each tensor
name to ``{"shape", "dtype", "offset"}`` (offset relative to the payload
start). The optional ``"__meta__"`` entry carries free-form JSON such as
network specs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DAGN"
VERSION = 1
META_KEY = "__meta__"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    header: dict = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise CheckpointError(f"{META_KEY!r} is reserved")
        arr = np.asarray(tensors[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    if meta is not None:
        header[META_KEY] = meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = memoryview(data)[16 + hlen:]
    meta = header.pop(META_KEY, None)
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name!r}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=dt).reshape(entry["shape"])
        tensors[name] = arr.astype(entry["dtype"])
    return tensors, meta
