"""Single-file checkpoint container.

Layout::

    b"PCAMCKPT"                 8-byte magic
    uint64 little-endian        length of the JSON manifest in bytes
    manifest                    UTF-8 JSON: {"format", "meta", "fields": [{name, shape, offset}], "checksum"}
    buffers                     raw little-endian f64 arrays, in manifest order

``checksum`` is the SHA-256 of the concatenated buffers. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCAMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def arrays_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    fields = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        fields.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT_VERSION,
        "meta": meta or {},
        "fields": fields,
        "checksum": arrays_checksum(arrays),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    body = memoryview(raw)[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for f in manifest["fields"]:
        count = int(np.prod(f["shape"], dtype=np.int64))
        start = f["offset"]
        stop = start + 8 * count
        if stop > len(body):
            raise CheckpointError(f"field {f['name']!r} runs past end of file")
        arrays[f["name"]] = np.frombuffer(body[start:stop], dtype="<f8").astype(np.float64).reshape(f["shape"])
    if arrays_checksum(arrays) != manifest["checksum"]:
        raise CheckpointError("checksum mismatch")
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
