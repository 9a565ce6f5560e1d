"""PLY point reader/writer (ascii and binary little-endian).

Only vertex positions are read; any other property or element is skipped.
Writing emits float32 x, y, z and optionally one float32 ``error`` scalar.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from crcir.errors import DecodeError, InvalidInputError
from crcir.geometry import as_points

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DecodeError("not a PLY file")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise DecodeError("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _type(parts[2]), _type(parts[3]))))
            else:
                elements[-1][2].append((parts[2], _type(parts[1])))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DecodeError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _type(name: str) -> str:
    if name not in _TYPES:
        raise DecodeError(f"unknown PLY type {name!r}")
    return _TYPES[name]


def _vertex_columns(props) -> list[int]:
    names = [p[0] for p in props]
    try:
        return [names.index(a) for a in "xyz"]
    except ValueError:
        raise DecodeError("vertex element lacks x, y, z") from None


def _read_binary(body: memoryview, elements):
    pos = 0
    for name, count, props in elements:
        scalar = all(not isinstance(t, tuple) for _, t in props)
        if scalar:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            if pos + dt.itemsize * count > len(body):
                raise DecodeError("PLY body truncated")
            if name == "vertex":
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                return np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
            pos += dt.itemsize * count
            continue
        if name == "vertex":
            raise DecodeError("list properties on vertices are not supported")
        for _ in range(count):
            for _, t in props:
                if isinstance(t, tuple):
                    cnt_t = np.dtype("<" + t[1])
                    (k,) = np.frombuffer(body, cnt_t, 1, pos)
                    pos += cnt_t.itemsize + int(k) * np.dtype(t[2]).itemsize
                else:
                    pos += np.dtype(t).itemsize
    raise DecodeError("PLY file has no vertex element")


def _read_ascii(body: bytes, elements):
    lines = iter(body.decode("ascii", errors="replace").splitlines())
    for name, count, props in elements:
        if name != "vertex":
            for _ in range(count):
                next(lines, None)
            continue
        cols = _vertex_columns(props)
        out = np.empty((count, 3))
        for i in range(count):
            row = next(lines, None)
            if row is None:
                raise DecodeError("PLY body truncated")
            vals = row.split()
            try:
                out[i] = [float(vals[c]) for c in cols]
            except (IndexError, ValueError) as exc:
                raise DecodeError(f"bad vertex row {i}") from exc
        return out
    raise DecodeError("PLY file has no vertex element")


def read_ply(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fmt, elements, start = _parse_header(data)
    for name, _, props in elements:
        if name == "vertex":
            _vertex_columns(props)
    if fmt == "ascii":
        return _read_ascii(data[start:], elements)
    return _read_binary(memoryview(data)[start:], elements)


def write_ply(path, points, binary: bool = True, error=None) -> None:
    pts = as_points(points).astype(np.float32)
    props = ["x", "y", "z"]
    cols = [pts]
    if error is not None:
        err = np.asarray(error, dtype=np.float32).reshape(-1, 1)
        if len(err) != len(pts):
            raise InvalidInputError("error vector length differs from the point count")
        props.append("error")
        cols.append(err)
    table = np.concatenate(cols, axis=1)
    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0", f"element vertex {len(pts)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = np.ascontiguousarray(table, dtype="<f4").tobytes()
    else:
        body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in table).encode("ascii")
    Path(path).write_bytes(head + body)
