"""End-to-end compression and decompression.

Bitstream layout (little-endian)::

    header   magic "CRC1", version, flags, n, m_actual, r, Q, k_enc, k_dec,
             model checksum, normalisation centre (3 x f64) and scale (f64),
             base / z / y section lengths, payload crc32, header crc32
    [debug]  present when flag bit 0 is set: four 8-byte digests of the
             encoder-side sparse cloud, FPS chain, Gaussian parameters and
             y CDF tables
    base     octree-coded sparse cloud
    z        hyper latent under the factorized prior
    y        cluster latents under the conditional Gaussians

The encoder decodes its own base section and runs every later stage on that
decoded, Morton-ordered cloud, so both sides see identical inputs.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from crcir.basecodec import DEFAULT_DEPTH, octree_decode, octree_encode, quantize_coords
from crcir.coder import gaussian_cdfs
from crcir.entropy import (
    GaussianParams,
    GraphPlan,
    batch_plans,
    build_graph_plan,
    decode_y,
    decode_z,
    encode_y,
    encode_z,
    half_range,
    round_half_away,
)
from crcir.errors import DecodeError, InvalidInputError, ModelMismatchError
from crcir.geometry import (
    NormalizationTransform,
    as_points,
    farthest_point_sample,
    interpolate_upsample,
    normalize_unit_cube,
    residual_targets,
)
from crcir.metrics import MetricReport, evaluate
from crcir.model import CodecModel
from crcir.refinement import encode_clusters, local_scale, refine

MAGIC = b"CRC1"
VERSION = 1
FLAG_DEBUG = 1
LADDER = (48, 30, 24, 20, 15, 12, 10, 8, 6)
MIN_CLUSTERS = 8

_HEAD = struct.Struct("<4sBBIIIBBBQ4dIIII")
_CRC = struct.Struct("<I")
_DIGESTS = ("sparse", "fps", "gaussian", "cdf")
_DEBUG = struct.Struct("<" + "Q" * len(_DIGESTS))


@dataclass(frozen=True)
class CodecConfig:
    rate: float = 30.0  # target n / m
    depth: int = DEFAULT_DEPTH
    debug: bool = False
    pairing: str = "matched"  # encoder-side only; the decoder never needs it

    def clusters_for(self, n: int) -> int:
        if not self.rate > 0:
            raise InvalidInputError("downsampling rate must be positive")
        return max(MIN_CLUSTERS, int(round(n / self.rate)))


@dataclass(frozen=True)
class Header:
    n: int
    m_actual: int
    r: int
    depth: int
    k_enc: int
    k_dec: int
    model_checksum: int
    center: tuple[float, float, float]
    scale: float
    len_base: int
    len_z: int
    len_y: int
    payload_crc: int
    flags: int = 0

    def pack(self) -> bytes:
        body = _HEAD.pack(
            MAGIC, VERSION, self.flags, self.n, self.m_actual, self.r, self.depth,
            self.k_enc, self.k_dec, self.model_checksum, *self.center, self.scale,
            self.len_base, self.len_z, self.len_y, self.payload_crc,
        )
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        size = _HEAD.size + _CRC.size
        if len(data) < size:
            raise DecodeError("bitstream shorter than its header")
        vals = _HEAD.unpack_from(data)
        (crc,) = _CRC.unpack_from(data, _HEAD.size)
        if vals[0] != MAGIC:
            raise DecodeError("not a CRC1 bitstream")
        if crc != zlib.crc32(data[: _HEAD.size]):
            raise DecodeError("header checksum mismatch")
        if vals[1] != VERSION:
            raise DecodeError(f"unsupported bitstream version {vals[1]}")
        (_, _, flags, n, m, r, q, ke, kd, chk, cx, cy, cz, sc, lb, lz, ly, pcrc) = vals
        return cls(n, m, r, q, ke, kd, chk, (cx, cy, cz), sc, lb, lz, ly, pcrc, flags)

    @staticmethod
    def size() -> int:
        return _HEAD.size + _CRC.size


@dataclass
class Bitstream:
    header: Header
    base: bytes
    z: bytes
    y: bytes
    digests: dict | None = None

    def to_bytes(self) -> bytes:
        dbg = b""
        if self.header.flags & FLAG_DEBUG:
            dbg = _DEBUG.pack(*(self.digests[k] for k in _DIGESTS))
        return self.header.pack() + dbg + self.base + self.z + self.y

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        h = Header.unpack(data)
        pos = Header.size()
        digests = None
        if h.flags & FLAG_DEBUG:
            if len(data) < pos + _DEBUG.size:
                raise DecodeError("bitstream truncated in the debug block")
            digests = dict(zip(_DIGESTS, _DEBUG.unpack_from(data, pos)))
            pos += _DEBUG.size
        expected = pos + h.len_base + h.len_z + h.len_y
        if len(data) < expected:
            raise DecodeError("bitstream truncated")
        if len(data) > expected:
            raise DecodeError("bitstream has trailing bytes")
        payload = data[pos:]
        if zlib.crc32(payload) != h.payload_crc:
            raise DecodeError("payload checksum mismatch")
        base = payload[: h.len_base]
        z = payload[h.len_base : h.len_base + h.len_z]
        y = payload[h.len_base + h.len_z :]
        return cls(h, base, z, y, digests)

    def __len__(self) -> int:
        return len(self.to_bytes())

    @property
    def bpp(self) -> float:
        return 8.0 * len(self) / self.header.n


def _digest(*arrays) -> int:
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return int.from_bytes(h.digest(), "little")


# --------------------------------------------------------------------------
# shared stages
# --------------------------------------------------------------------------


def hyper_decode(model: CodecModel, z_hat: np.ndarray, plan: GraphPlan) -> GaussianParams:
    """Mean and scale per latent element, computed identically on both sides."""
    model.eval()
    with torch.no_grad():
        mu, sigma = model.hyper_decoder(torch.as_tensor(np.asarray(z_hat, np.float32)), batch_plans([plan]))
    return GaussianParams(mu.numpy(), sigma.numpy())


def hyper_encode(model: CodecModel, y: np.ndarray, plan: GraphPlan) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        z = model.hyper_encoder(torch.as_tensor(np.asarray(y, np.float32)), batch_plans([plan]))
    return z.numpy()


def choose_r(n: int, m: int) -> int:
    return int(min(max(round(n / m), 1), m - 1))


@dataclass
class Trace:
    """Intermediates recorded during a coding run, for inspection and tests."""

    sparse: np.ndarray | None = None
    plan: GraphPlan | None = None
    y: np.ndarray | None = None
    z_hat: np.ndarray | None = None
    y_hat: np.ndarray | None = None
    gaussian: GaussianParams | None = None
    base: np.ndarray | None = None
    digests: dict = field(default_factory=dict)


def _digests(sparse, plan, gp, symbols_half_range: int) -> dict:
    cdf = gaussian_cdfs(gp.sigma.ravel().astype(np.float64), -symbols_half_range, symbols_half_range).cdf
    return {
        "sparse": _digest(np.asarray(sparse, "<f8")),
        "fps": _digest(plan.fps_chain().astype("<i8")),
        "gaussian": _digest(np.frombuffer(gp.to_bytes(), np.uint8)),
        "cdf": _digest(cdf.astype("<i8")),
    }


# --------------------------------------------------------------------------
# compress / decompress
# --------------------------------------------------------------------------


def compress(cloud, model: CodecModel, config: CodecConfig = CodecConfig(), trace: Trace | None = None) -> bytes:
    pts = as_points(cloud)
    n = len(pts)
    m = config.clusters_for(n)
    if m > n:
        raise InvalidInputError(f"cloud of {n} points is too small for {m} clusters")
    normed, tf = normalize_unit_cube(pts)

    seeds = farthest_point_sample(normed, m)
    base_bytes = octree_encode(quantize_coords(normed[seeds], config.depth))
    sparse = octree_decode(base_bytes).dequantize()
    m_actual = len(sparse)
    if m_actual < MIN_CLUSTERS:
        raise InvalidInputError(f"only {m_actual} distinct voxels survive quantisation; need {MIN_CLUSTERS}")
    r = choose_r(n, m_actual)

    base, cmap = interpolate_upsample(sparse, r)
    res = residual_targets(normed, base, cmap, config.pairing)
    scale = local_scale(sparse)
    y = encode_clusters(cmap, res, model.encoder, scale)

    plan = build_graph_plan(sparse, model.k_enc, model.k_dec)
    z_hat = round_half_away(hyper_encode(model, y, plan)).astype(np.float32)
    gp = hyper_decode(model, z_hat, plan)
    sym = round_half_away(y.astype(np.float64) - gp.mu.astype(np.float64)).astype(np.int64)

    prior = model.prior_params()
    z_bytes = encode_z(z_hat, prior)
    y_bytes = encode_y(sym, gp.sigma)

    payload = base_bytes + z_bytes + y_bytes
    flags = FLAG_DEBUG if config.debug else 0
    header = Header(
        n, m_actual, r, config.depth, model.k_enc, model.k_dec, model.checksum,
        tuple(float(c) for c in tf.center), float(tf.scale),
        len(base_bytes), len(z_bytes), len(y_bytes), zlib.crc32(payload), flags,
    )
    digests = _digests(sparse, plan, gp, half_range(sym)) if (config.debug or trace is not None) else None
    if trace is not None:
        trace.sparse, trace.plan, trace.y, trace.z_hat = sparse, plan, y, z_hat
        trace.gaussian, trace.base = gp, base
        trace.y_hat = (sym + gp.mu.astype(np.float64)).astype(np.float32)
        trace.digests = digests
    return Bitstream(header, base_bytes, z_bytes, y_bytes, digests).to_bytes()


def decompress(
    data: bytes,
    model: CodecModel,
    r_prime: int | None = None,
    refinement: bool = True,
    trace: Trace | None = None,
) -> np.ndarray:
    """Reconstruct ``m_actual * r_prime`` points in the original frame."""
    bs = Bitstream.from_bytes(data)
    h = bs.header
    if h.model_checksum != model.checksum:
        raise ModelMismatchError(
            f"bitstream was made with model {h.model_checksum:016x}, loaded model is {model.checksum:016x}"
        )
    qc = octree_decode(bs.base)
    if qc.depth != h.depth or len(qc) != h.m_actual:
        raise DecodeError("base section disagrees with the header")
    sparse = qc.dequantize()
    r_prime = h.r if r_prime is None else int(r_prime)
    if not 1 <= r_prime <= h.m_actual - 1:
        raise InvalidInputError(f"decode rate {r_prime} outside [1, {h.m_actual - 1}]")

    plan = build_graph_plan(sparse, h.k_enc, h.k_dec)
    z_hat = decode_z(bs.z, plan.m_coarse, model.prior_params())
    gp = hyper_decode(model, z_hat, plan)
    sym = decode_y(bs.y, gp.sigma)
    y_hat = (sym + gp.mu.astype(np.float64)).astype(np.float32)

    if bs.digests is not None or trace is not None:
        L = int(bs.y[0]) if bs.y else 1
        digests = _digests(sparse, plan, gp, L)
        if bs.digests is not None:
            for k in _DIGESTS:
                if bs.digests[k] != digests[k]:
                    raise DecodeError(f"encoder/decoder mismatch in {k}")
        if trace is not None:
            trace.digests = digests

    base, cmap = interpolate_upsample(sparse, r_prime)
    out = refine(base, cmap, y_hat, model.decoder, local_scale(sparse)) if refinement else base
    if trace is not None:
        trace.sparse, trace.plan, trace.z_hat, trace.y_hat = sparse, plan, z_hat, y_hat
        trace.gaussian, trace.base = gp, base
    tf = NormalizationTransform(np.array(h.center), h.scale)
    return tf.invert(out)


@dataclass(frozen=True)
class RDPoint:
    rate: float
    bpp: float
    chamfer: float
    psnr: float
    base_chamfer: float
    section_bytes: tuple[int, int, int]

    @classmethod
    def csv_header(cls) -> str:
        return "rate,bpp,chamfer,psnr,base_chamfer,base_bytes,z_bytes,y_bytes"

    def csv_row(self) -> str:
        return (
            f"{self.rate:g},{self.bpp:.6f},{self.chamfer:.9e},{self.psnr:.6f},"
            f"{self.base_chamfer:.9e},{self.section_bytes[0]},{self.section_bytes[1]},{self.section_bytes[2]}"
        )


def rd_point(cloud, config: CodecConfig, model: CodecModel, reference=None) -> RDPoint:
    """Compress, decompress and score against ``reference`` (default: the input)."""
    pts = as_points(cloud)
    ref = pts if reference is None else as_points(reference, "reference")
    data = compress(pts, model, config)
    rec = decompress(data, model)
    base = decompress(data, model, refinement=False)
    rep: MetricReport = evaluate(ref, rec, len(data))
    h = Bitstream.from_bytes(data).header
    base_rep = evaluate(ref, base, len(data))
    return RDPoint(config.rate, 8.0 * len(data) / len(pts), rep.chamfer, rep.p2plane_psnr, base_rep.chamfer,
                   (h.len_base, h.len_z, h.len_y))


def rd_sweep(cloud, model: CodecModel, rates=LADDER, depth: int = DEFAULT_DEPTH, reference=None) -> list[RDPoint]:
    return [rd_point(cloud, CodecConfig(rate=r, depth=depth), model, reference) for r in rates]
