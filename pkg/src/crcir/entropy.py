"""Graph-based conditional entropy model for the cluster latents.

The hyperencoder coarsens the sparse cloud three times (FPS seeds, kNN
patches, EdgeConv with max pooling) and emits a small side latent ``z`` on the
surviving seeds. The hyperdecoder reruns the same FPS chain on the decoded
sparse cloud, re-encodes ``z_hat`` and gathers it back onto every sparse point
with softmax(-alpha * distance) weights, then predicts a mean and a scale per
latent element. ``z_hat`` itself is coded under a per-channel discretised
logistic prior.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit, ndtr
from torch import nn

from crcir.coder import CdfSet, CodedBlock, decode_symbols, encode_symbols, gaussian_cdfs, logistic_cdfs
from crcir.errors import DecodeError, InvalidInputError, StateError
from crcir.geometry import as_points, farthest_point_sample, knn
from crcir.nn import ResnetBlock
from crcir.refinement import LATENT_DIM

SIGMA_FLOOR = 1e-2
SCALE_FLOOR = 1e-2
PROB_FLOOR = 2.0 ** -16
LEVELS = 3
MAX_HALF_RANGE = 64
_LN2 = math.log(2.0)
_FAR = 1e3


def coarse_count(m: int, levels: int = LEVELS) -> int:
    for _ in range(levels):
        m = -(-m // 2)
    return m


# --------------------------------------------------------------------------
# graph plan: everything the hyper networks need from geometry alone
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphLevel:
    seeds: np.ndarray  # (n_next,) indices into the previous level
    patch: np.ndarray  # (n_next, k) previous-level indices, self first


@dataclass(frozen=True)
class GraphPlan:
    levels: tuple[GraphLevel, ...]
    coarse_points: np.ndarray  # (m_c, 3)
    gather_index: np.ndarray  # (m, k_dec) into coarse_points
    gather_dist: np.ndarray  # (m, k_dec)

    @property
    def m(self) -> int:
        return self.gather_index.shape[0]

    @property
    def m_coarse(self) -> int:
        return self.coarse_points.shape[0]

    def fps_chain(self) -> np.ndarray:
        """Seed indices into the sparse cloud for every level, concatenated."""
        idx = np.arange(self.m)
        out = []
        for lv in self.levels:
            idx = idx[lv.seeds]
            out.append(idx)
        return np.concatenate(out)


def _patches(points: np.ndarray, seeds: np.ndarray, k: int) -> np.ndarray:
    k_eff = min(k, len(points))
    nl = knn(points[seeds], points, k_eff).indices
    if k_eff < k:
        nl = np.concatenate([nl, np.repeat(nl[:, -1:], k - k_eff, axis=1)], axis=1)
    # a seed is its own nearest point unless a duplicate with a smaller index
    # ties at zero distance; pin the seed itself into the first slot
    nl[:, 0] = seeds
    return nl


def build_graph_plan(sparse, k_enc: int = 8, k_dec: int = 4) -> GraphPlan:
    """Deterministic coarsening chain and gather neighbourhoods for a sparse cloud."""
    pts = as_points(sparse, "sparse")
    m = pts.shape[0]
    if m < 8:
        raise InvalidInputError(f"need at least 8 sparse points to coarsen three times, got {m}")
    if k_enc < 1 or k_dec < 1:
        raise InvalidInputError("patch and gather sizes must be positive")
    levels = []
    cur = pts
    for _ in range(LEVELS):
        seeds = farthest_point_sample(cur, -(-len(cur) // 2))
        levels.append(GraphLevel(seeds, _patches(cur, seeds, k_enc)))
        cur = cur[seeds]
    kd = min(k_dec, len(cur))
    nl = knn(pts, cur, kd)
    gi, gd = nl.indices, nl.distances
    if kd < k_dec:
        # pad with far-away copies that receive (numerically) zero weight; a
        # finite distance keeps the alpha gradient well defined
        pad = k_dec - kd
        gi = np.concatenate([gi, np.repeat(gi[:, -1:], pad, axis=1)], axis=1)
        gd = np.concatenate([gd, np.full((m, pad), _FAR)], axis=1)
    return GraphPlan(tuple(levels), cur.copy(), gi, gd)


@dataclass(frozen=True)
class BatchedPlan:
    """Several plans with indices shifted into one concatenated node set."""

    seeds: tuple[torch.Tensor, ...]
    patches: tuple[torch.Tensor, ...]
    gather_index: torch.Tensor
    gather_dist: torch.Tensor
    sizes: tuple[tuple[int, ...], ...]  # node counts per level, per plan


def batch_plans(plans) -> BatchedPlan:
    plans = list(plans)
    seeds, patches = [], []
    counts = [np.array([p.m for p in plans])]
    for lv in range(LEVELS):
        off = np.concatenate([[0], np.cumsum(counts[-1])[:-1]])
        seeds.append(torch.as_tensor(np.concatenate([p.levels[lv].seeds + o for p, o in zip(plans, off)])))
        patches.append(torch.as_tensor(np.concatenate([p.levels[lv].patch + o for p, o in zip(plans, off)])))
        counts.append(np.array([len(p.levels[lv].seeds) for p in plans]))
    coff = np.concatenate([[0], np.cumsum(counts[-1])[:-1]])
    gi = np.concatenate([p.gather_index + o for p, o in zip(plans, coff)])
    gd = np.concatenate([p.gather_dist for p in plans])
    sizes = tuple(tuple(int(c) for c in col) for col in np.stack(counts, axis=1))
    return BatchedPlan(
        tuple(seeds), tuple(patches), torch.as_tensor(gi), torch.as_tensor(gd, dtype=torch.float32), sizes
    )


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


class EdgeConvBlock(nn.Module):
    """h(x_i, x_j - x_i) on every patch edge, max-pooled at the seed."""

    def __init__(self, in_ch: int, out_ch: int, activation: bool = True):
        super().__init__()
        self.in_ch = in_ch
        self.edge = nn.Linear(2 * in_ch, out_ch)
        self.activation = activation

    def forward(self, x: torch.Tensor, seeds: torch.Tensor, patch: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_ch:
            raise InvalidInputError(f"expected {self.in_ch} channels, got {x.shape[-1]}")
        xi = x[seeds][:, None, :]
        xj = x[patch]
        h = self.edge(torch.cat([xi.expand_as(xj), xj - xi], dim=-1))
        if self.activation:
            h = torch.relu(h)
        return h.amax(dim=1)


class HyperEncoder(nn.Module):
    def __init__(self, channels=(LATENT_DIM, 32, 32, LATENT_DIM)):
        super().__init__()
        pairs = list(zip(channels[:-1], channels[1:]))
        self.blocks = nn.ModuleList(
            EdgeConvBlock(a, b, activation=i < len(pairs) - 1) for i, (a, b) in enumerate(pairs)
        )

    def forward(self, y: torch.Tensor, plan: BatchedPlan) -> torch.Tensor:
        x = y
        for blk, seeds, patch in zip(self.blocks, plan.seeds, plan.patches):
            x = blk(x, seeds, patch)
        return x


def gather_weights(dist: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """w_j = exp(-alpha d_j) / sum_i exp(-alpha d_i) over each row."""
    return torch.softmax(-alpha * dist, dim=-1)


class HyperDecoder(nn.Module):
    def __init__(self, latent: int = LATENT_DIM, width: int = 32):
        super().__init__()
        self.latent = latent
        self.reencode = ResnetBlock(latent, width, norm=False)
        self.log_alpha = nn.Parameter(torch.zeros(()))
        self.head = ResnetBlock(width, 2 * latent, norm=False)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def forward(self, z_hat: torch.Tensor, plan: BatchedPlan) -> tuple[torch.Tensor, torch.Tensor]:
        z1 = self.reencode(z_hat)
        w = gather_weights(plan.gather_dist.to(z1.dtype), self.alpha)
        feat = (w[..., None] * z1[plan.gather_index]).sum(dim=1)
        out = self.head(feat)
        mu, raw = out[:, : self.latent], out[:, self.latent :]
        return mu, F.softplus(raw) + SIGMA_FLOOR


class FactorizedPrior(nn.Module):
    """Per-channel discretised logistic over the integers."""

    def __init__(self, channels: int = LATENT_DIM):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        # softplus(0.5413) = 1
        self.raw_scale = nn.Parameter(torch.full((channels,), 0.5413))

    @property
    def scale(self) -> torch.Tensor:
        return F.softplus(self.raw_scale) + SCALE_FLOOR

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Bits per element of (noisy or rounded) ``z``."""
        return logistic_bits(z, self.loc, self.scale)


# --------------------------------------------------------------------------
# differentiable likelihoods
# --------------------------------------------------------------------------


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_bits(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """-log2 of the unit-interval Gaussian mass around ``v``, elementwise.

    Evaluated on the lower tail side (|v - mu|) so that far-out values keep
    their precision.
    """
    c = torch.abs(v - mu)
    p = _std_normal_cdf((0.5 - c) / sigma) - _std_normal_cdf((-0.5 - c) / sigma)
    return -torch.log(p.clamp_min(PROB_FLOOR)) / _LN2


def logistic_bits(v: torch.Tensor, loc: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    c = torch.abs(v - loc)
    p = torch.sigmoid((0.5 - c) / scale) - torch.sigmoid((-0.5 - c) / scale)
    return -torch.log(p.clamp_min(PROB_FLOOR)) / _LN2


# --------------------------------------------------------------------------
# analytic rates on concrete values
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray  # (m, 8) float32
    sigma: np.ndarray  # (m, 8) float32

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.mu, "<f4").tobytes() + np.ascontiguousarray(self.sigma, "<f4").tobytes()


def _interval_mass(c: np.ndarray, s: np.ndarray, cdf_fn) -> np.ndarray:
    return cdf_fn((0.5 - c) / s) - cdf_fn((-0.5 - c) / s)


def gaussian_rate_bits(y_hat, gp: GaussianParams) -> float:
    """Bits of ``y_hat`` (mean plus integer offset) under the conditional Gaussians."""
    sigma = np.asarray(gp.sigma, dtype=np.float64)
    if np.any(sigma < np.float32(SIGMA_FLOOR)):
        raise StateError("scale below the floor")
    y = np.asarray(y_hat, dtype=np.float64)
    mu = np.asarray(gp.mu, dtype=np.float64)
    if y.shape != mu.shape:
        raise InvalidInputError("latent and parameter shapes differ")
    p = _interval_mass(np.abs(y - mu), sigma, ndtr)
    return float(-np.log2(np.maximum(p, PROB_FLOOR)).sum())


@dataclass(frozen=True)
class PriorParams:
    loc: np.ndarray  # (C,)
    scale: np.ndarray  # (C,)

    @classmethod
    def from_module(cls, prior: FactorizedPrior) -> "PriorParams":
        with torch.no_grad():
            return cls(prior.loc.numpy().astype(np.float32), prior.scale.numpy().astype(np.float32))


def factorized_rate_bits(z_hat, prior: PriorParams) -> float:
    z = np.asarray(z_hat, dtype=np.float64)
    loc = np.asarray(prior.loc, dtype=np.float64)
    scale = np.asarray(prior.scale, dtype=np.float64)
    p = _interval_mass(np.abs(z - loc), scale, expit)
    return float(-np.log2(np.maximum(p, PROB_FLOOR)).sum())


# --------------------------------------------------------------------------
# section coding with escapes
# --------------------------------------------------------------------------

_SECTION = struct.Struct("<BI")


def _leb128(values) -> bytes:
    out = bytearray()
    for v in values:
        v = int(v)
        while True:
            b = v & 0x7F
            v >>= 7
            out.append(b | (0x80 if v else 0))
            if not v:
                break
    return bytes(out)


def _read_leb128(data: bytes, count: int) -> list[int]:
    vals, pos = [], 0
    for _ in range(count):
        v = shift = 0
        while True:
            if pos >= len(data):
                raise DecodeError("escape values truncated")
            b = data[pos]
            pos += 1
            v |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                break
            if shift > 35:
                raise DecodeError("escape value too long")
        vals.append(v)
    if pos != len(data):
        raise DecodeError("trailing bytes after escape values")
    return vals


def half_range(symbols: np.ndarray) -> int:
    peak = int(np.abs(symbols).max()) if symbols.size else 0
    return min(peak + 1, MAX_HALF_RANGE)


def _pack_section(symbols: np.ndarray, tables_for) -> bytes:
    sym = np.asarray(symbols, dtype=np.int64)
    L = half_range(sym)
    clipped = np.clip(sym, -L, L)
    esc = np.abs(sym[np.abs(sym) >= L]) - L
    block = encode_symbols(clipped.ravel(), *tables_for(L))
    return _SECTION.pack(L, len(block.payload)) + block.to_bytes() + _leb128(esc)


def _unpack_section(data: bytes, n: int, tables_for) -> np.ndarray:
    if len(data) < _SECTION.size + 4:
        raise DecodeError("latent section too short")
    L, plen = _SECTION.unpack_from(data)
    if not 1 <= L <= MAX_HALF_RANGE:
        raise DecodeError(f"invalid symbol range {L}")
    start = _SECTION.size
    end = start + 4 + plen
    if end > len(data):
        raise DecodeError("latent section truncated")
    block = CodedBlock.from_bytes(data[start:end])
    if block.count != n:
        raise DecodeError(f"latent section holds {block.count} symbols, expected {n}")
    sym = decode_symbols(block, *tables_for(L)).astype(np.int64)
    at_edge = np.abs(sym) >= L
    esc = _read_leb128(data[end:], int(at_edge.sum()))
    sym[at_edge] = np.sign(sym[at_edge]) * (L + np.asarray(esc, dtype=np.int64))
    return sym


def encode_y(symbols, sigma) -> bytes:
    """Code integer offsets ``round(y - mu)`` under zero-mean tables per element."""
    s = np.asarray(symbols, dtype=np.int64)
    sig = np.asarray(sigma, dtype=np.float64).ravel()
    return _pack_section(s, lambda L: (gaussian_cdfs(sig, -L, L),))


def decode_y(data: bytes, sigma) -> np.ndarray:
    sig = np.asarray(sigma, dtype=np.float64)
    flat = _unpack_section(data, sig.size, lambda L: (gaussian_cdfs(sig.ravel(), -L, L),))
    return flat.reshape(sig.shape)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _prior_tables(prior: PriorParams, n_rows: int):
    loc = np.asarray(prior.loc, dtype=np.float64)
    centre = round_half_away(loc)
    frac = loc - centre
    scale = np.asarray(prior.scale, dtype=np.float64)
    C = len(loc)
    index = np.tile(np.arange(C, dtype=np.int64), n_rows)
    return centre, lambda L: (logistic_cdfs(frac, scale, -L, L), index)


def encode_z(z_hat, prior: PriorParams) -> bytes:
    z = np.asarray(z_hat, dtype=np.float64)
    centre, tables = _prior_tables(prior, z.shape[0])
    return _pack_section((z - centre).astype(np.int64), tables)


def decode_z(data: bytes, n_rows: int, prior: PriorParams) -> np.ndarray:
    centre, tables = _prior_tables(prior, n_rows)
    C = len(centre)
    sym = _unpack_section(data, n_rows * C, tables).reshape(n_rows, C)
    return (sym + centre).astype(np.float32)


# --------------------------------------------------------------------------
# fitted factorized baseline for comparisons
# --------------------------------------------------------------------------


def fit_factorized(values) -> PriorParams:
    """Maximum-likelihood per-channel discretised logistic for integer data."""
    from scipy.optimize import minimize

    v = np.asarray(values, dtype=np.float64)
    locs, scales = [], []
    for col in v.T:

        def nll(theta):
            s = np.exp(theta[1]) + SCALE_FLOOR
            p = _interval_mass(np.abs(col - theta[0]), s, expit)
            return -np.log(np.maximum(p, PROB_FLOOR)).sum()

        x0 = np.array([np.median(col), np.log(max(col.std(), 0.1))])
        res = minimize(nll, x0, method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-6})
        locs.append(res.x[0])
        scales.append(np.exp(res.x[1]) + SCALE_FLOOR)
    return PriorParams(np.array(locs, np.float32), np.array(scales, np.float32))
