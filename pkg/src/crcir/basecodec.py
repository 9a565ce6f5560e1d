"""Coordinate codec for the sparse base layer.

Coordinates in [-1, 1] are snapped to a ``2**Q`` grid, duplicates collapse, and
the surviving voxels are written as breadth-first octree occupancy masks coded
under an adaptive order-0 byte model. Decoded voxels come back in Morton
order, which every later stage treats as the canonical point order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from crcir.coder import CodedBlock, decode_bytes_adaptive, encode_bytes_adaptive
from crcir.errors import DecodeError, InvalidInputError
from crcir.geometry import as_points

DEFAULT_DEPTH = 9
_HEADER = struct.Struct("<BI")


@dataclass(frozen=True)
class QuantizedCloud:
    indices: np.ndarray  # (m, 3) int64 grid coordinates, Morton ordered
    depth: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def dequantize(self) -> np.ndarray:
        return self.indices.astype(np.float64) / ((1 << self.depth) - 1) * 2.0 - 1.0


def morton_code(indices: np.ndarray, depth: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    code = np.zeros(idx.shape[0], dtype=np.int64)
    for b in range(depth):
        for axis in range(3):
            code |= ((idx[:, axis] >> b) & 1) << (3 * b + 2 - axis)
    return code


def morton_decode(code: np.ndarray, depth: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    idx = np.zeros((code.shape[0], 3), dtype=np.int64)
    for b in range(depth):
        for axis in range(3):
            idx[:, axis] |= ((code >> (3 * b + 2 - axis)) & 1) << b
    return idx


def _check_depth(depth: int):
    if not 1 <= depth <= 20:
        raise InvalidInputError(f"bit depth {depth} outside [1, 20]")


def quantize_coords(cloud, depth: int = DEFAULT_DEPTH) -> QuantizedCloud:
    """Snap coordinates to the grid, keep the first copy of each voxel, sort by Morton code."""
    _check_depth(depth)
    pts = as_points(cloud)
    if np.any(np.abs(pts) > 1.0):
        raise InvalidInputError("coordinates must lie in [-1, 1]")
    levels = (1 << depth) - 1
    idx = np.floor((pts + 1.0) / 2.0 * levels + 0.5).astype(np.int64)
    return from_grid(idx, depth)


def from_grid(indices, depth: int) -> QuantizedCloud:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    codes, first = np.unique(morton_code(idx, depth), return_index=True)
    return QuantizedCloud(idx[first], depth)


def occupancy_masks(qc: QuantizedCloud) -> bytes:
    """Breadth-first child-occupancy bytes, one per internal node."""
    if len(qc) == 0:
        return b""
    codes = np.unique(morton_code(qc.indices, qc.depth))
    out = []
    for level in range(qc.depth):
        child = np.unique(codes >> (3 * (qc.depth - level - 1)))
        parent = child >> 3
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        bits = (np.int64(1) << (child & 7)).astype(np.uint8)
        out.append(np.bitwise_or.reduceat(bits, starts))
    return np.concatenate(out).tobytes()


def masks_to_grid(masks: bytes, depth: int) -> np.ndarray:
    arr = np.frombuffer(masks, dtype=np.uint8)
    nodes = np.zeros(1, dtype=np.int64)
    pos = 0
    shifts = np.arange(8, dtype=np.uint8)
    for _ in range(depth):
        level = arr[pos : pos + len(nodes)]
        if len(level) < len(nodes):
            raise DecodeError("occupancy stream ended early")
        if np.any(level == 0):
            raise DecodeError("empty occupancy mask")
        pos += len(nodes)
        row, bit = np.nonzero((level[:, None] >> shifts) & 1)
        nodes = (nodes[row] << 3) | bit
    if pos != len(arr):
        raise DecodeError("occupancy stream has trailing masks")
    return morton_decode(nodes, depth)


def octree_encode(qc: QuantizedCloud) -> bytes:
    """Serialise as ``Q`` (1 byte), voxel count (4 bytes), coded occupancy block."""
    _check_depth(qc.depth)
    block = encode_bytes_adaptive(occupancy_masks(qc))
    return _HEADER.pack(qc.depth, len(qc)) + block.to_bytes()


def octree_decode(data: bytes) -> QuantizedCloud:
    if len(data) < _HEADER.size + 4:
        raise DecodeError("base layer section too short")
    depth, count = _HEADER.unpack_from(data)
    if not 1 <= depth <= 20:
        raise DecodeError(f"invalid bit depth {depth}")
    if count == 0:
        raise DecodeError("base layer holds no points")
    masks = decode_bytes_adaptive(CodedBlock.from_bytes(data[_HEADER.size :]))
    idx = masks_to_grid(masks, depth)
    if len(idx) != count:
        raise DecodeError(f"decoded {len(idx)} voxels, header says {count}")
    return QuantizedCloud(idx, depth)
