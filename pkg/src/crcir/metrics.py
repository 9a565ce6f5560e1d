"""Geometry distortion and rate metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from crcir.errors import InvalidInputError
from crcir.geometry import as_points, knn, nearest

NORMAL_NEIGHBOURS = 16


def chamfer(a, b) -> float:
    """Mean squared nearest distance a->b plus the same b->a."""
    pa, pb = as_points(a, "a"), as_points(b, "b")
    _, dab = nearest(pa, pb)
    _, dba = nearest(pb, pa)
    return float(dab.mean() + dba.mean())


def estimate_normals(points, k: int = NORMAL_NEIGHBOURS) -> np.ndarray:
    """Unoriented unit normals from PCA over each point's k nearest points (itself included)."""
    pts = as_points(points)
    if len(pts) < k:
        raise InvalidInputError(f"normal estimation needs at least {k} points, got {len(pts)}")
    nbr = pts[knn(pts, pts, k).indices]
    centred = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def p2plane_mse(reference, test) -> float:
    ref = as_points(reference, "reference")
    tst = as_points(test, "test")
    normals = estimate_normals(ref)
    idx, _ = nearest(tst, ref)
    proj = np.einsum("ij,ij->i", tst - ref[idx], normals[idx])
    return float(np.mean(proj * proj))


def bbox_diagonal(points) -> float:
    pts = as_points(points)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def p2plane_psnr(reference, test, peak: float | None = None) -> float:
    """Point-to-plane PSNR in dB; ``math.inf`` flags a zero error."""
    if peak is None:
        peak = bbox_diagonal(reference)
    if not peak > 0:
        raise InvalidInputError("PSNR peak must be positive (degenerate reference)")
    err = p2plane_mse(reference, test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def per_point_error(reconstruction, reference) -> np.ndarray:
    """Euclidean distance from every reconstructed point to the reference."""
    _, d2 = nearest(as_points(reconstruction, "reconstruction"), as_points(reference, "reference"))
    return np.sqrt(d2)


def bits_per_point(n_bytes: int, n_points: int) -> float:
    if n_points <= 0:
        raise InvalidInputError("point count must be positive")
    return 8.0 * n_bytes / n_points


@dataclass(frozen=True)
class MetricReport:
    chamfer: float
    p2plane_psnr: float
    bpp: float
    n_points: int = 0
    label: str = ""

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.p2plane_psnr)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def csv_row(self) -> str:
        psnr = "inf" if self.psnr_infinite else f"{self.p2plane_psnr:.6f}"
        return f"{self.chamfer:.9e},{psnr},{self.bpp:.6f},{self.n_points},{self.label}"


def evaluate(reference, reconstruction, n_bytes: int, label: str = "") -> MetricReport:
    ref = as_points(reference, "reference")
    return MetricReport(
        chamfer=chamfer(ref, reconstruction),
        p2plane_psnr=p2plane_psnr(ref, reconstruction),
        bpp=bits_per_point(n_bytes, len(ref)),
        n_points=len(ref),
        label=label,
    )
