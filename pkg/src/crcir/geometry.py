"""Deterministic geometric kernels shared by the encoder and the decoder.

Point clouds are plain ``(n, 3)`` float64 arrays. Every routine here is a pure
function; distance ties are always resolved towards the smaller index so that
the encoder can replicate the decoder's view of the data bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from crcir.errors import InvalidInputError

# u_ij of the interpolation upsampler: one golden-section step towards the
# neighbour, shortened for neighbours beyond the 8th
GOLDEN_WEIGHT = 1.0 - (np.sqrt(5.0) - 1.0) / 2.0
FAR_WEIGHT = 0.75 * GOLDEN_WEIGHT
NEAR_NEIGHBOURS = 8


def as_points(cloud, name: str = "cloud") -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.isfinite(pts).all():
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class NormalizationTransform:
    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        out = (np.asarray(points, dtype=np.float64) - self.center) / self.scale
        return np.clip(out, -1.0, 1.0)

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def normalize_unit_cube(cloud) -> tuple[np.ndarray, NormalizationTransform]:
    """Map a cloud into [-1, 1]^3 with a uniform scale about its bounding-box center.

    A cloud with zero extent maps to the origin with scale 1.
    """
    pts = as_points(cloud)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) / 2.0
    scale = half if half > 0.0 else 1.0
    transform = NormalizationTransform(center=center, scale=scale)
    return transform.apply(pts), transform


# --------------------------------------------------------------------------
# farthest point sampling
# --------------------------------------------------------------------------


@njit(cache=True)
def _fps_kernel(pts, m, order, cstart, cell_of, bbmin, bbmax):
    n = pts.shape[0]
    ncell = cstart.shape[0] - 1
    mind = np.full(n, np.inf)
    cmax = np.full(ncell, np.inf)
    carg = np.empty(ncell, np.int64)
    for c in range(ncell):
        carg[c] = order[cstart[c]]
    out = np.empty(m, np.int64)
    cur = 0
    for it in range(m):
        out[it] = cur
        mind[cur] = -1.0
        qx = pts[cur, 0]
        qy = pts[cur, 1]
        qz = pts[cur, 2]
        home = cell_of[cur]
        for c in range(ncell):
            dx = 0.0
            if qx < bbmin[c, 0]:
                dx = bbmin[c, 0] - qx
            elif qx > bbmax[c, 0]:
                dx = qx - bbmax[c, 0]
            dy = 0.0
            if qy < bbmin[c, 1]:
                dy = bbmin[c, 1] - qy
            elif qy > bbmax[c, 1]:
                dy = qy - bbmax[c, 1]
            dz = 0.0
            if qz < bbmin[c, 2]:
                dz = bbmin[c, 2] - qz
            elif qz > bbmax[c, 2]:
                dz = qz - bbmax[c, 2]
            # lower bound is <= every member distance under IEEE rounding,
            # so skipping a cell never changes the result
            lb = (dx * dx + dy * dy) + dz * dz
            if not (cmax[c] > lb) and c != home:
                continue
            best = -np.inf
            barg = order[cstart[c]]
            for s in range(cstart[c], cstart[c + 1]):
                p = order[s]
                if mind[p] >= 0.0:
                    ex = pts[p, 0] - qx
                    ey = pts[p, 1] - qy
                    ez = pts[p, 2] - qz
                    d = (ex * ex + ey * ey) + ez * ez
                    if d < mind[p]:
                        mind[p] = d
                if mind[p] > best:
                    best = mind[p]
                    barg = p
            cmax[c] = best
            carg[c] = barg
        best = -np.inf
        bi = n
        for c in range(ncell):
            if cmax[c] > best or (cmax[c] == best and carg[c] < bi):
                best = cmax[c]
                bi = carg[c]
        cur = bi
    return out


def _spatial_cells(pts: np.ndarray, per_cell: int = 48):
    n = pts.shape[0]
    g = max(1, int(round((n / per_cell) ** (1.0 / 3.0))))
    lo = pts.min(axis=0)
    ext = pts.max(axis=0) - lo
    ext[ext == 0.0] = 1.0
    ijk = np.minimum((((pts - lo) / ext) * g).astype(np.int64), g - 1)
    key = (ijk[:, 0] * g + ijk[:, 1]) * g + ijk[:, 2]
    order = np.lexsort((np.arange(n), key))
    uniq, cell_of, counts = np.unique(key, return_inverse=True, return_counts=True)
    cstart = np.zeros(len(uniq) + 1, dtype=np.int64)
    np.cumsum(counts, out=cstart[1:])
    sorted_cells = cell_of[order]
    bbmin = np.full((len(uniq), 3), np.inf)
    bbmax = np.full((len(uniq), 3), -np.inf)
    np.minimum.at(bbmin, sorted_cells, pts[order])
    np.maximum.at(bbmax, sorted_cells, pts[order])
    return order.astype(np.int64), cstart, cell_of.astype(np.int64), bbmin, bbmax


def farthest_point_sample(cloud, m: int) -> np.ndarray:
    """Greedy farthest point sampling seeded at index 0.

    Each pick maximises the squared distance to the already selected set, ties
    going to the smallest index. The returned indices are in selection order,
    so the result for ``m`` is a prefix of the result for any larger ``m``.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    m = int(m)
    if not 1 <= m <= n:
        raise InvalidInputError(f"cannot sample {m} points from {n}")
    return _fps_kernel(np.ascontiguousarray(pts), m, *_spatial_cells(pts))


# --------------------------------------------------------------------------
# nearest neighbours
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray  # (nq, k) int64, ascending distance
    distances: np.ndarray  # (nq, k) float64


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def _sort_candidates(cand: np.ndarray, d2: np.ndarray):
    order = np.lexsort((cand, d2), axis=-1)
    return np.take_along_axis(cand, order, -1), np.take_along_axis(d2, order, -1)


def knn(queries, refs, k: int, exclude_self: bool = False) -> NeighborList:
    """Exact k nearest neighbours under Euclidean distance.

    With ``exclude_self`` the queries are the reference set itself and query
    ``i`` never lists reference ``i`` (coincident duplicates still do).
    """
    q = as_points(queries, "queries")
    ref = as_points(refs, "refs")
    nq, nr = q.shape[0], ref.shape[0]
    if exclude_self and nq != nr:
        raise InvalidInputError("exclude_self requires queries to be the reference set")
    kmax = nr - 1 if exclude_self else nr
    k = int(k)
    if not 1 <= k <= kmax:
        raise InvalidInputError(f"k={k} outside [1, {kmax}]")

    fetch = min(nr, k + int(exclude_self) + 4)
    _, cand = cKDTree(ref).query(q, k=fetch)
    cand = np.asarray(cand, dtype=np.int64).reshape(nq, fetch)
    d2 = _sqdist(q[:, None, :], ref[cand])
    if exclude_self:
        d2[cand == np.arange(nq)[:, None]] = np.inf
    cand, d2 = _sort_candidates(cand, d2)

    if fetch < nr:
        # a tie reaching the last fetched candidate may hide an equally near
        # point with a smaller index; resolve those rows by linear scan
        finite = np.where(np.isfinite(d2), d2, -np.inf)
        worst = finite.max(axis=1)
        kth = d2[:, k - 1]
        for row in np.flatnonzero(worst <= kth * (1.0 + 1e-9) + 1e-300):
            full = _sqdist(q[row], ref)
            if exclude_self:
                full[row] = np.inf
            idx = np.lexsort((np.arange(nr), full))[:fetch]
            cand[row], d2[row] = idx, full[idx]

    idx = cand[:, :k]
    return NeighborList(indices=idx, distances=np.sqrt(d2[:, :k]))


def nearest(queries, refs) -> tuple[np.ndarray, np.ndarray]:
    """Index of, and squared distance to, the nearest reference per query."""
    nl = knn(queries, refs, 1)
    idx = nl.indices[:, 0]
    return idx, _sqdist(as_points(queries), as_points(refs)[idx])


# --------------------------------------------------------------------------
# base-layer upsampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterMap:
    """Assignment of upsampled points to the sparse point they came from.

    Member ``j`` of cluster ``i`` is upsampled point ``i * r + j``.
    """

    centroids: np.ndarray  # (m, 3)
    centroid_index: np.ndarray  # (m,) index into the sparse cloud
    neighbor_index: np.ndarray  # (m, r) sparse neighbour used for each member
    member_relpos: np.ndarray  # (m, r, 3)
    members: np.ndarray  # (m, r, 3) absolute positions

    @property
    def m(self) -> int:
        return self.member_relpos.shape[0]

    @property
    def r(self) -> int:
        return self.member_relpos.shape[1]

    def points(self) -> np.ndarray:
        return self.members.reshape(-1, 3)

    def cluster_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.r)


def interpolation_weights(r: int) -> np.ndarray:
    j = np.arange(1, r + 1)
    return np.where(j <= NEAR_NEIGHBOURS, GOLDEN_WEIGHT, FAR_WEIGHT)


def interpolate_upsample(sparse, r: int) -> tuple[np.ndarray, ClusterMap]:
    """Expand each sparse point into ``r`` points along its nearest neighbours.

    Member j of point i sits at ``p_i + u_j (p_ij - p_i)`` where ``p_ij`` is the
    j-th nearest other sparse point.
    """
    pts = as_points(sparse, "sparse")
    m, r = pts.shape[0], int(r)
    if m < 2:
        raise InvalidInputError("interpolation needs at least two sparse points")
    if not 1 <= r <= m - 1:
        raise InvalidInputError(f"upsampling rate {r} outside [1, {m - 1}]")
    nbr = knn(pts, pts, r, exclude_self=True).indices
    u = interpolation_weights(r)[None, :, None]
    centre = pts[:, None, :]
    members = centre + u * (pts[nbr] - centre)
    relpos = members - centre
    cmap = ClusterMap(
        centroids=pts.copy(),
        centroid_index=np.arange(m, dtype=np.int64),
        neighbor_index=nbr,
        member_relpos=relpos,
        members=members,
    )
    return members.reshape(-1, 3), cmap


PAIRINGS = ("nearest", "matched")


@njit(cache=True)
def _assign(cost, rows, cols, out):
    """Minimum-cost assignment of ``rows <= cols`` (shortest augmenting paths)."""
    inf = np.inf
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    p = np.zeros(cols + 1, np.int64)
    way = np.zeros(cols + 1, np.int64)
    minv = np.empty(cols + 1)
    used = np.empty(cols + 1, np.bool_)
    for i in range(1, rows + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, cols + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    for j in range(1, cols + 1):
        if p[j]:
            out[p[j] - 1] = j - 1


@njit(cache=True)
def _matched_kernel(base, orig, order, bounds, r, idx):
    m = len(bounds) - 1
    for c in range(m):
        lo, hi = bounds[c], bounds[c + 1]
        k = hi - lo
        if k == 0:
            continue
        transpose = k < r
        rows, cols = (k, r) if transpose else (r, k)
        cost = np.empty((rows, cols))
        for a in range(r):
            for b in range(k):
                d = 0.0
                for t in range(3):
                    e = base[c * r + a, t] - orig[order[lo + b], t]
                    d += e * e
                if transpose:
                    cost[b, a] = d
                else:
                    cost[a, b] = d
        out = np.empty(rows, np.int64)
        _assign(cost, rows, cols, out)
        for x in range(rows):
            if transpose:
                idx[c * r + out[x]] = order[lo + x]
            else:
                idx[c * r + x] = order[lo + out[x]]


def assignment(cost) -> np.ndarray:
    """Column assigned to each row of a cost matrix with ``rows <= cols``."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise InvalidInputError("assignment needs a 2-d cost matrix with no more rows than columns")
    out = np.empty(cost.shape[0], np.int64)
    if cost.shape[0]:
        _assign(cost, cost.shape[0], cost.shape[1], out)
    return out


def residual_targets(original, base, cmap: ClusterMap | None = None, pairing: str = "nearest") -> np.ndarray:
    """Offset from every base point to the original point it is paired with.

    ``nearest`` pairs each base point with its nearest original point.
    ``matched`` first gives every original point to the cluster of its nearest
    centroid, then pairs members and owned originals one to one within each
    cluster by minimum total squared distance; members left over when a
    cluster owns fewer originals than it has members fall back to nearest.
    """
    orig = as_points(original, "original")
    b = as_points(base, "base")
    if pairing not in PAIRINGS:
        raise InvalidInputError(f"unknown residual pairing {pairing!r}; choose from {PAIRINGS}")
    # encoder-side only, so plain kd-tree queries suffice; nothing downstream
    # has to reproduce the choice between equidistant originals
    idx = np.asarray(cKDTree(orig).query(b, k=1)[1], dtype=np.int64)
    if pairing == "matched":
        if cmap is None or cmap.m * cmap.r != len(b):
            raise InvalidInputError("matched pairing needs the cluster map of the base cloud")
        owner = np.asarray(cKDTree(cmap.centroids).query(orig, k=1)[1], dtype=np.int64)
        order = np.argsort(owner, kind="stable")
        bounds = np.searchsorted(owner[order], np.arange(cmap.m + 1))
        _matched_kernel(b, orig, order, bounds, cmap.r, idx)
    return orig[idx] - b
