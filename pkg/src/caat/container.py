"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"CAATBIN\\0"
    version    u32
    header     u32 length + UTF-8 JSON (sorted keys)
    count      u32
    entries    count x [u32 path length, UTF-8 path, u32 ndim,
                        ndim x u64 dims, raw <f8 values]

Checkpoints and persisted datasets both use this layout; the JSON header's
``kind`` field tells them apart.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError, FormatError

MAGIC = b"CAATBIN\x00"
VERSION = 1


def write_container(path, header: dict, entries) -> None:
    """Write ``entries`` (iterable of ``(name, array)``) with ``header``."""
    entries = list(entries)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(entries))]
    for name, array in entries:
        arr = np.asarray(array, dtype="<f8")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.source}: truncated at byte {self.pos} (needed {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_container(path):
    """Return ``(header, [(name, array), ...])`` from a container file."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"no such file: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: bad magic header; not a container file (format v{VERSION})")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version} (expected {VERSION})")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header block: {exc}") from None
    entries = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
        entries.append((name, values.reshape(shape)))
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes after last entry")
    return header, entries
