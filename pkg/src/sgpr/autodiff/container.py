"""Named-tensor container file.

Layout (little endian)::

    magic    8 bytes   b"SGPRTNSR"
    version  u32
    meta     u32 length + UTF-8 JSON (sorted keys)
    count    u32
    count x  { u16 name length, name, u8 ndim, ndim x u64 dims, float64 payload }

Payloads are row-major float64, so a round trip is bit exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"SGPRTNSR"
FORMAT_VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
        pos = 16
        meta = json.loads(blob[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 1)
            pos += 1 + 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise FormatError(f"tensor {name!r} payload is truncated")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt tensor container: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
