"""Range coder over integer symbols with frozen 16-bit CDF tables.

The coder is a carry-propagating 32-bit range coder (low kept in 33 bits)
with byte-wise renormalisation. All arithmetic inside the coding loop is on
integers, so a stream decodes identically on every platform once the CDF
tables have been integerised.

A coded block is serialised as a 4-byte little-endian symbol count followed by
the payload. The leading byte that the carry scheme always emits as zero is
dropped, and the final flush emits a single byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import expit, ndtr

from crcir.errors import DecodeError, InvalidInputError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
# bytes the decoder reads past the end of a well-formed payload
_PAD = 3
ADAPTIVE_INCREMENT = 24


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies for symbols ``offset .. offset + size - 1``."""

    offset: int
    cdf: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cdf, dtype=np.int64)
        if c.ndim != 1 or len(c) < 2:
            raise InvalidInputError("a CDF table needs at least one symbol")
        if c[0] != 0 or c[-1] != TOTAL or np.any(np.diff(c) < 1):
            raise InvalidInputError("CDF must rise strictly from 0 to 2**16")
        object.__setattr__(self, "cdf", c)

    @property
    def size(self) -> int:
        return len(self.cdf) - 1

    def masses(self) -> np.ndarray:
        return np.diff(self.cdf)


@dataclass(frozen=True)
class CdfSet:
    """Several CDF tables packed into one padded matrix for the coding kernels."""

    cdf: np.ndarray  # (T, Smax + 1), rows padded with TOTAL
    offsets: np.ndarray  # (T,)
    sizes: np.ndarray  # (T,)

    @classmethod
    def from_tables(cls, tables: Sequence[CdfTable]) -> "CdfSet":
        if len(tables) == 0:
            return cls(np.zeros((0, 2), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        width = max(t.size for t in tables) + 1
        cdf = np.full((len(tables), width), TOTAL, dtype=np.int64)
        for i, t in enumerate(tables):
            cdf[i, : t.size + 1] = t.cdf
        return cls(
            cdf,
            np.array([t.offset for t in tables], np.int64),
            np.array([t.size for t in tables], np.int64),
        )

    def __len__(self) -> int:
        return self.cdf.shape[0]

    def table(self, i: int) -> CdfTable:
        return CdfTable(int(self.offsets[i]), self.cdf[i, : self.sizes[i] + 1].copy())


@dataclass(frozen=True)
class CodedBlock:
    count: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.count) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedBlock":
        if len(data) < 4:
            raise DecodeError("coded block shorter than its symbol count field")
        (count,) = struct.unpack_from("<I", data)
        return cls(count, bytes(data[4:]))

    def __len__(self) -> int:
        return 4 + len(self.payload)


# --------------------------------------------------------------------------
# CDF construction
# --------------------------------------------------------------------------


def quantize_pmf(pmf) -> np.ndarray:
    """Integerise rows of a PMF to masses summing to 2**16, each at least 1.

    Masses start from rounding; the rounding surplus or deficit is settled on
    the symbols whose rounding error was largest in the needed direction, and
    anything left over lands on the most probable symbol.
    """
    p = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    rows, nsym = p.shape
    if nsym < 1:
        raise InvalidInputError("empty symbol range")
    if nsym > TOTAL:
        raise InvalidInputError("alphabet larger than the probability precision")
    p = np.maximum(p, 0.0)
    tot = p.sum(axis=1, keepdims=True)
    p = np.where(tot > 0, p / np.where(tot > 0, tot, 1.0), 1.0 / nsym)
    x = p * TOTAL
    m = np.maximum(np.floor(x + 0.5).astype(np.int64), 1)
    err = x - m
    deficit = TOTAL - m.sum(axis=1)

    m += _settle(err, np.maximum(deficit, 0), np.ones_like(m, bool))
    m -= _settle(-err, np.maximum(-deficit, 0), m > 1)

    rest = TOTAL - m.sum(axis=1)
    m[np.arange(rows), np.argmax(m, axis=1)] += rest
    cdf = np.zeros((rows, nsym + 1), dtype=np.int64)
    np.cumsum(m, axis=1, out=cdf[:, 1:])
    return cdf


def _settle(score, count, eligible) -> np.ndarray:
    """Pick ``count`` eligible entries per row with the highest score.

    A group of equal scores straddling the cut is left out entirely, which
    keeps symmetric PMFs symmetric.
    """
    rows, nsym = score.shape
    key = np.where(eligible, score, -np.inf)
    srt = -np.sort(-key, axis=1)
    r = np.arange(rows)
    c = np.clip(count, 1, nsym)
    thresh = srt[r, c - 1]
    after = np.where(count < nsym, srt[r, np.minimum(count, nsym - 1)], -np.inf)
    pick = key > thresh[:, None]
    pick |= (key == thresh[:, None]) & (after != thresh)[:, None]
    pick &= eligible & (count > 0)[:, None] & np.isfinite(key)
    return pick.astype(np.int64)


def _interval_pmf(lo: int, hi: int, mu_frac, scale, cdf_fn) -> np.ndarray:
    """PMF of a rounded continuous variable over ``[lo, hi]``; the end symbols
    absorb the tails so they can act as escapes."""
    v = np.arange(lo, hi + 1, dtype=np.float64)[None, :]
    mu = np.asarray(mu_frac, dtype=np.float64).reshape(-1, 1)
    s = np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    c = np.abs(v - mu)
    pmf = cdf_fn((0.5 - c) / s) - cdf_fn((-0.5 - c) / s)
    pmf[:, 0] = cdf_fn((lo + 0.5 - mu[:, 0]) / s[:, 0])
    if hi > lo:
        pmf[:, -1] = cdf_fn((mu[:, 0] - hi + 0.5) / s[:, 0])
    else:
        pmf[:, -1] = 1.0
    return pmf


def _check_range(lo: int, hi: int):
    if hi < lo:
        raise InvalidInputError(f"empty symbol range [{lo}, {hi}]")


def gaussian_cdfs(sigma, lo: int, hi: int, mu_frac=0.0) -> CdfSet:
    """One quantised discretised-Gaussian table per element of ``sigma``."""
    _check_range(lo, hi)
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    mu = np.broadcast_to(np.asarray(mu_frac, dtype=np.float64), sigma.shape)
    cdf = quantize_pmf(_interval_pmf(lo, hi, mu, sigma, ndtr))
    n = len(sigma)
    return CdfSet(cdf, np.full(n, lo, np.int64), np.full(n, hi - lo + 1, np.int64))


def build_gaussian_cdf(mu_frac: float, sigma: float, lo: int, hi: int) -> CdfTable:
    return gaussian_cdfs([sigma], lo, hi, mu_frac).table(0)


def logistic_cdfs(loc_frac, scale, lo: int, hi: int) -> CdfSet:
    _check_range(lo, hi)
    scale = np.asarray(scale, dtype=np.float64).ravel()
    loc = np.broadcast_to(np.asarray(loc_frac, dtype=np.float64), scale.shape)
    cdf = quantize_pmf(_interval_pmf(lo, hi, loc, scale, expit))
    n = len(scale)
    return CdfSet(cdf, np.full(n, lo, np.int64), np.full(n, hi - lo + 1, np.int64))


# --------------------------------------------------------------------------
# coding kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _shift_low(st, out):
    # st = [low, range, cache, pending, pos]
    low = st[0]
    if low < 0xFF000000 or low >= 0x100000000:
        carry = low >> 32
        temp = st[2]
        while True:
            out[st[4]] = (temp + carry) & 0xFF
            st[4] += 1
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8


@njit(cache=True)
def _encode(st, out, start, size, total):
    r = st[1] // total
    st[0] += r * start
    st[1] = r * size
    while st[1] < _TOP:
        st[1] <<= 8
        _shift_low(st, out)


@njit(cache=True)
def _finish(st, out):
    # any value in [low, low + range) identifies the stream; pick the one
    # whose low 24 bits are zero so only its top byte must be written
    st[0] = (st[0] + 0xFFFFFF) & ~np.int64(0xFFFFFF)
    _shift_low(st, out)
    _shift_low(st, out)
    return st[4]


@njit(cache=True)
def _encode_static(symbols, tidx, cdf, offsets, sizes):
    n = symbols.shape[0]
    out = np.zeros(3 * n + 16, np.uint8)
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], np.int64)
    for i in range(n):
        t = tidx[i]
        s = symbols[i] - offsets[t]
        if s < 0 or s >= sizes[t]:
            return out[:0], i
        start = cdf[t, s]
        _encode(st, out, start, cdf[t, s + 1] - start, 65536)
    end = _finish(st, out)
    return out[:end], -1


@njit(cache=True)
def _next(buf, pos):
    if pos < buf.shape[0]:
        return np.int64(buf[pos])
    return np.int64(0)


@njit(cache=True)
def _decode_static(buf, n, tidx, cdf, offsets, sizes):
    out = np.empty(n, np.int64)
    code = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    pos = 0
    for _ in range(4):
        code = (code << 8) | _next(buf, pos)
        pos += 1
    for i in range(n):
        t = tidx[i]
        r = rng // 65536
        v = code // r
        if v >= 65536:
            return out, i, pos
        lo = 0
        hi = sizes[t]
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[t, mid] <= v:
                lo = mid
            else:
                hi = mid
        start = cdf[t, lo]
        code -= r * start
        rng = r * (cdf[t, lo + 1] - start)
        while rng < _TOP:
            code = (code << 8) | _next(buf, pos)
            pos += 1
            rng <<= 8
        out[i] = lo + offsets[t]
    return out, -1, pos


@njit(cache=True)
def _encode_adaptive(data, inc):
    n = data.shape[0]
    out = np.zeros(3 * n + 16, np.uint8)
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], np.int64)
    freq = np.ones(256, np.int64)
    total = 256
    for i in range(n):
        s = data[i]
        start = 0
        for j in range(s):
            start += freq[j]
        _encode(st, out, start, freq[s], total)
        freq[s] += inc
        total += inc
        if total > 65536 - inc:
            total = 0
            for j in range(256):
                freq[j] = (freq[j] + 1) >> 1
                total += freq[j]
    end = _finish(st, out)
    return out[:end]


@njit(cache=True)
def _decode_adaptive(buf, n, inc):
    out = np.empty(n, np.uint8)
    code = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    pos = 0
    for _ in range(4):
        code = (code << 8) | _next(buf, pos)
        pos += 1
    freq = np.ones(256, np.int64)
    total = 256
    for i in range(n):
        r = rng // total
        v = code // r
        if v >= total:
            return out, i, pos
        s = 0
        start = 0
        while start + freq[s] <= v:
            start += freq[s]
            s += 1
        code -= r * start
        rng = r * freq[s]
        while rng < _TOP:
            code = (code << 8) | _next(buf, pos)
            pos += 1
            rng <<= 8
        out[i] = s
        freq[s] += inc
        total += inc
        if total > 65536 - inc:
            total = 0
            for j in range(256):
                freq[j] = (freq[j] + 1) >> 1
                total += freq[j]
    return out, -1, pos


def _strip_lead(raw: np.ndarray) -> bytes:
    # the first byte out of the carry scheme is always zero
    assert raw[0] == 0
    return raw[1:].tobytes()


def _check_consumed(pos: int, payload_len: int):
    if pos > payload_len + _PAD:
        raise DecodeError("coded block is truncated")
    if pos < payload_len + _PAD:
        raise DecodeError("coded block has trailing bytes")


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def _as_set(cdfs, n: int, index):
    if isinstance(cdfs, CdfSet):
        table_set = cdfs
        if index is None:
            if len(table_set) != n:
                raise InvalidInputError(f"{len(table_set)} tables for {n} symbols")
            index = np.arange(n, dtype=np.int64)
    else:
        tables = list(cdfs)
        if index is None and len(tables) != n:
            raise InvalidInputError(f"{len(tables)} tables for {n} symbols")
        table_set = CdfSet.from_tables(tables)
        if index is None:
            index = np.arange(n, dtype=np.int64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if len(index) != n:
        raise InvalidInputError("table index length differs from the symbol count")
    if n and (index.min() < 0 or index.max() >= len(table_set)):
        raise InvalidInputError("table index out of range")
    return table_set, index


def encode_symbols(symbols, cdfs, index=None) -> CodedBlock:
    """Range-code ``symbols``; symbol ``i`` uses table ``index[i]`` (default ``i``)."""
    sym = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    table_set, index = _as_set(cdfs, len(sym), index)
    raw, bad = _encode_static(sym, index, table_set.cdf, table_set.offsets, table_set.sizes)
    if bad >= 0:
        t = index[bad]
        lo = int(table_set.offsets[t])
        raise InvalidInputError(
            f"symbol {int(sym[bad])} at position {bad} outside table range "
            f"[{lo}, {lo + int(table_set.sizes[t]) - 1}]"
        )
    return CodedBlock(len(sym), _strip_lead(raw))


def decode_symbols(block: CodedBlock | bytes, cdfs, index=None) -> np.ndarray:
    if not isinstance(block, CodedBlock):
        block = CodedBlock.from_bytes(block)
    table_set, index = _as_set(cdfs, block.count, index)
    buf = np.frombuffer(block.payload, dtype=np.uint8)
    out, bad, pos = _decode_static(
        buf, block.count, index, table_set.cdf, table_set.offsets, table_set.sizes
    )
    if bad >= 0:
        raise DecodeError(f"corrupt coded block at symbol {bad}")
    _check_consumed(pos, len(buf))
    return out


def encode_bytes_adaptive(data) -> CodedBlock:
    """Code a byte string under an adaptive order-0 frequency model."""
    arr = np.ascontiguousarray(np.frombuffer(bytes(data), dtype=np.uint8))
    raw = _encode_adaptive(arr, ADAPTIVE_INCREMENT)
    return CodedBlock(len(arr), _strip_lead(raw))


def decode_bytes_adaptive(block: CodedBlock | bytes) -> bytes:
    if not isinstance(block, CodedBlock):
        block = CodedBlock.from_bytes(block)
    buf = np.frombuffer(block.payload, dtype=np.uint8)
    out, bad, pos = _decode_adaptive(buf, block.count, ADAPTIVE_INCREMENT)
    if bad >= 0:
        raise DecodeError(f"corrupt adaptive block at byte {bad}")
    _check_consumed(pos, len(buf))
    return out.tobytes()


def ideal_bits(symbols, cdfs, index=None) -> float:
    """Information content of ``symbols`` under the integerised tables."""
    sym = np.asarray(symbols, dtype=np.int64).ravel()
    table_set, index = _as_set(cdfs, len(sym), index)
    s = sym - table_set.offsets[index]
    masses = table_set.cdf[index, s + 1] - table_set.cdf[index, s]
    return float(-np.log2(masses / TOTAL).sum())
