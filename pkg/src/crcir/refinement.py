"""Learned refinement transforms.

The cluster encoder turns the residuals of one cluster into a single latent
row; the residual decoder is an implicit function of a query's position
relative to its cluster centroid, conditioned on that cluster's latent.
Because the decoder only ever sees relative positions, it can be queried at
any density.

Both networks work in units of a per-cluster length scale (the mean distance
from the centroid to its nearest sparse neighbours), which the decoder can
recompute from the sparse cloud alone. This keeps the inputs of order one
across downsampling rates and cloud sizes.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from crcir.errors import InvalidInputError
from crcir.geometry import ClusterMap, as_points, knn
from crcir.nn import ResnetBlock, mlp, segment_softmax, segment_sum

LATENT_DIM = 8
SCALE_NEIGHBOURS = 8


def local_scale(sparse) -> np.ndarray:
    """Mean distance from every sparse point to its nearest other sparse points."""
    pts = as_points(sparse, "sparse")
    if len(pts) < 2:
        raise InvalidInputError("local scale needs at least two sparse points")
    k = min(SCALE_NEIGHBOURS, len(pts) - 1)
    d = knn(pts, pts, k, exclude_self=True).distances.mean(axis=1)
    return np.maximum(d, 1e-9)


def member_features(cluster_map: ClusterMap, residuals, scale) -> np.ndarray:
    """Per-member (relpos, residual) in units of the cluster scale."""
    s = np.asarray(scale, dtype=np.float64)[:, None, None]
    res = np.asarray(residuals, dtype=np.float64).reshape(cluster_map.m, cluster_map.r, 3)
    feats = np.concatenate([cluster_map.member_relpos / s, res / s], axis=2)
    return feats.reshape(-1, 6)


class ClusterEncoder(nn.Module):
    """Per-member features, attention-weighted pooling per cluster, re-encoding."""

    def __init__(self, in_ch: int = 6, width: int = 64, latent: int = LATENT_DIM):
        super().__init__()
        self.block1 = ResnetBlock(in_ch, width, norm=True)
        self.block2 = ResnetBlock(width, width, norm=True)
        self.value = nn.Linear(width, width)
        self.score = nn.Linear(width, 1)
        self.block3 = ResnetBlock(width, latent, norm=True)

    def forward(self, feats: torch.Tensor, cluster_ids: torch.Tensor, n_clusters: int) -> torch.Tensor:
        h = self.block2(self.block1(feats))
        w = segment_softmax(self.score(h)[:, 0], cluster_ids, n_clusters)
        pooled = segment_sum(w[:, None] * self.value(h), cluster_ids, n_clusters)
        return self.block3(pooled)


class ResidualDecoder(nn.Module):
    def __init__(self, latent: int = LATENT_DIM, width: int = 64, depth: int = 3):
        super().__init__()
        self.body = mlp([3 + latent] + [width] * depth)
        self.head = nn.Linear(width, 3)

    def forward(self, relpos: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(torch.cat([relpos, latent], dim=-1)))


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a, dtype=np.float32))


def encode_clusters(cluster_map: ClusterMap, residuals, encoder: ClusterEncoder, scale=None) -> np.ndarray:
    """Latent row per cluster, in centroid order."""
    res = np.asarray(residuals, dtype=np.float64)
    if res.shape != (cluster_map.m * cluster_map.r, 3):
        raise InvalidInputError(
            f"expected {cluster_map.m * cluster_map.r} residuals, got {res.shape[0]}"
        )
    if scale is None:
        scale = np.ones(cluster_map.m)
    feats = member_features(cluster_map, res, scale)
    encoder.eval()
    ids = torch.as_tensor(cluster_map.cluster_ids())
    with torch.no_grad():
        y = encoder(_tensor(feats), ids, cluster_map.m)
    return y.numpy()


def decode_residual(query_relpos, latent, decoder: ResidualDecoder) -> np.ndarray:
    """Offset predicted for each (relative position, latent) pair; broadcasts over rows."""
    rel = np.atleast_2d(np.asarray(query_relpos, dtype=np.float32))
    lat = np.atleast_2d(np.asarray(latent, dtype=np.float32))
    with torch.no_grad():
        out = decoder(_tensor(rel), _tensor(lat)).numpy()
    return out[0] if np.ndim(query_relpos) == 1 else out


def predict_offsets(cluster_map: ClusterMap, latents, decoder: ResidualDecoder, scale=None) -> np.ndarray:
    """Offset for every member; each member is conditioned on its centroid's latent row."""
    lat = np.asarray(latents, dtype=np.float32)
    if lat.shape[0] != cluster_map.m:
        raise InvalidInputError(f"{lat.shape[0]} latent rows for {cluster_map.m} clusters")
    s = np.ones(cluster_map.m) if scale is None else np.asarray(scale, dtype=np.float64)
    s = s[:, None, None]
    rel = (cluster_map.member_relpos / s).reshape(-1, 3)
    per_query = np.repeat(lat, cluster_map.r, axis=0)
    out = decode_residual(rel, per_query, decoder).astype(np.float64)
    return (out.reshape(cluster_map.m, cluster_map.r, 3) * s).reshape(-1, 3)


def refine(base, cluster_map: ClusterMap, latents, decoder: ResidualDecoder, scale=None) -> np.ndarray:
    """Project base-layer points onto the learned surface: base + predicted offsets."""
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (cluster_map.m * cluster_map.r, 3):
        raise InvalidInputError("base cloud does not match the cluster map")
    return base + predict_offsets(cluster_map, latents, decoder, scale)
