"""Binary container shared by model checkpoints and pseudo-graph archives.

Layout: ``b"ACGKD1\\n"``, an 8-byte little-endian header length, a UTF-8 JSON
header, then every array as contiguous little-endian float64 in header order.
The header's ``tensors`` table lists ``name``, ``shape`` and ``offset`` (in
float64 elements) and is validated against the payload size before reading.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACGKD1\n"


class CheckpointError(ValueError):
    pass


def save_container(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    table, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    meta = dict(header)
    meta["tensors"] = table
    meta["payload_len"] = offset
    blob = json.dumps(meta, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an ACGKD container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += hlen
    payload = np.frombuffer(raw, dtype="<f8", offset=pos) if len(raw) > pos else np.zeros(0)
    expected = header.get("payload_len")
    total = 0
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=int))
        if entry["offset"] != total:
            raise CheckpointError(f"{path}: tensor {entry['name']} has offset {entry['offset']}, expected {total}")
        total += size
    if total != expected or payload.size != total:
        raise CheckpointError(f"{path}: shape table wants {total} values, payload has {payload.size}")
    arrays = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=int))
        arrays[entry["name"]] = payload[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)
    return header, arrays
