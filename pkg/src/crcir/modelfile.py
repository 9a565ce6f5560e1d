"""Binary weight container.

Layout (little-endian)::

    b"CRCW"  u8 version  u32 entry-count
    per entry: u16 name-length, name (utf-8), u8 rank, u32 dims[rank], f32 payload
    u64 checksum  (BLAKE2b-64 over every payload in file order)

The checksum doubles as the model id written into bitstreams.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from crcir.errors import DecodeError

MAGIC = b"CRCW"
VERSION = 1


def payload_checksum(arrays) -> int:
    h = hashlib.blake2b(digest_size=8)
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return int.from_bytes(h.digest(), "little")


def dumps(entries: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(entries))]
    for name, arr in entries.items():
        a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    parts.append(struct.pack("<Q", payload_checksum(entries.values())))
    return b"".join(parts)


def loads(data: bytes) -> tuple["OrderedDict[str, np.ndarray]", int]:
    try:
        if data[:4] != MAGIC:
            raise DecodeError("not a CRCW model file")
        version, count = struct.unpack_from("<BI", data, 4)
        if version != VERSION:
            raise DecodeError(f"unsupported model file version {version}")
        pos = 9
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
            entries[name] = arr.astype(np.float32)
            pos += 4 * size
        (stored,) = struct.unpack_from("<Q", data, pos)
        if pos + 8 != len(data):
            raise DecodeError("trailing bytes after model checksum")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DecodeError(f"malformed model file: {exc}") from exc
    actual = payload_checksum(entries.values())
    if actual != stored:
        raise DecodeError("model file checksum mismatch")
    return entries, stored


def save(path, entries) -> int:
    data = dumps(entries)
    Path(path).write_bytes(data)
    return struct.unpack_from("<Q", data, len(data) - 8)[0]


def load(path):
    return loads(Path(path).read_bytes())
