"""Per-type k-means clusters with cached member-to-centroid distances and ranks."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import binfmt
from .errors import UsageError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 25


def _sq_dists(x: np.ndarray, x_sq: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c_sq = (centroids * centroids).sum(axis=1)
    d2 = x_sq[:, None] - 2.0 * (x @ centroids.T) + c_sq[None, :]
    return np.maximum(d2, 0.0, out=d2)


def _kmeanspp(x: np.ndarray, x_sq: np.ndarray, g: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x_sq, x[chosen])[:, 0]
    for _ in range(1, g):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total <= 0.0:
            # every remaining point duplicates a chosen centroid
            break
        idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x_sq, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _assign(x, x_sq, centroids):
    d2 = _sq_dists(x, x_sq, centroids)
    assign = np.argmin(d2, axis=1)
    return assign, d2[np.arange(len(x)), assign]


def _update(x, assign, centroids, point_d2):
    g, dim = centroids.shape
    counts = np.bincount(assign, minlength=g)
    sums = np.zeros((g, dim))
    np.add.at(sums, assign, x)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if len(empty):
        spare = point_d2.copy()
        for j in empty:
            far = int(np.argmax(spare))
            new[j] = x[far]
            spare[far] = -1.0
    return new


def kmeans_fit(
    points,
    g: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
    sse_log: list[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from a seeded k-means++ start.

    Returns ``(centroids, assignment)`` where every point is assigned to its
    nearest returned centroid (ties to the lower index). Clusters left empty
    are dropped, so fewer than ``g`` centroids may come back. With
    ``g >= len(points)`` each point is its own centroid.

    If ``sse_log`` is given, the sum of squared errors after every assignment
    step is appended to it.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise UsageError("kmeans_fit needs a non-empty (n, d) array")
    if g < 1:
        raise UsageError(f"g must be >= 1, got {g}")
    n = len(x)
    if g >= n:
        if sse_log is not None:
            sse_log.append(0.0)
        return x.copy(), np.arange(n)

    rng = np.random.default_rng(seed)
    x_sq = (x * x).sum(axis=1)
    centroids = _kmeanspp(x, x_sq, g, rng)
    assign, point_d2 = _assign(x, x_sq, centroids)
    if sse_log is not None:
        sse_log.append(float(point_d2.sum()))
    for _ in range(max_iters):
        centroids = _update(x, assign, centroids, point_d2)
        new_assign, point_d2 = _assign(x, x_sq, centroids)
        if sse_log is not None:
            sse_log.append(float(point_d2.sum()))
        stable = np.array_equal(new_assign, assign)
        assign = new_assign
        if stable:
            break

    used = np.unique(assign)
    if len(used) < len(centroids):
        remap = np.full(len(centroids), -1)
        remap[used] = np.arange(len(used))
        centroids, assign = centroids[used], remap[assign]
    return centroids, assign


@dataclass(eq=False)
class TypeCluster:
    type_id: int
    centroid: np.ndarray  # float32 (d,)
    member_ids: np.ndarray  # int64 global indices
    member_dists: np.ndarray  # float32 L2 member -> centroid
    rank_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.rank_order is None:
            self.rank_order = rank_members(self.member_dists, self.member_ids)
        self._ranked_dists = self.member_dists[self.rank_order]

    def __len__(self) -> int:
        return len(self.member_ids)


def rank_members(member_dists: np.ndarray, member_ids: np.ndarray) -> np.ndarray:
    """Ascending by distance, ties to the lower global id."""
    return np.lexsort((member_ids, member_dists)).astype(np.int64)


def member_distances(vectors: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    diff = np.asarray(vectors, dtype=np.float64) - np.asarray(centroid, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=1)).astype(np.float32)


def make_cluster(type_id: int, vectors: np.ndarray, member_ids: np.ndarray) -> TypeCluster:
    """Centroid is the float64 mean of the members, stored as float32."""
    centroid = np.asarray(vectors, dtype=np.float64).mean(axis=0).astype(np.float32)
    dists = member_distances(vectors, centroid)
    return TypeCluster(int(type_id), centroid, np.asarray(member_ids, dtype=np.int64), dists)


def cached_topk(cluster, k: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` cached ranks and their distances; no distance work.

    Returns ``(positions, dists)`` where positions index the cluster's member
    arrays. Works on any cluster exposing ``rank_order`` and ``member_dists``.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    ranked = getattr(cluster, "_ranked_dists", None)
    if ranked is None:
        ranked = cluster.member_dists[cluster.rank_order]
    return cluster.rank_order[:k], ranked[:k]


def nearest_centroid(query, centroids: np.ndarray) -> tuple[int, np.ndarray]:
    """Index of the nearest row (ties to the lowest index) and all L2 distances."""
    if len(centroids) == 0:
        raise UsageError("no clusters to search")
    diff = np.asarray(centroids, dtype=np.float64) - np.asarray(query, dtype=np.float64)
    dists = np.sqrt((diff * diff).sum(axis=1))
    return int(np.argmin(dists)), dists


def nearest_cluster(query, clusters: Sequence[TypeCluster]) -> int:
    if len(clusters) == 0:
        raise UsageError("nearest_cluster called with an empty cluster list")
    return nearest_centroid(query, np.stack([c.centroid for c in clusters]))[0]


def num_clusters_for(freq: int, m: int) -> int:
    return max(1, freq // m)


@dataclass(eq=False)
class TypeClusterMap:
    clusters: dict[int, list[TypeCluster]]
    m: int
    dim: int
    _centroids: dict = field(default_factory=dict, init=False, repr=False)

    def __contains__(self, type_id: int) -> bool:
        return int(type_id) in self.clusters

    def types(self) -> list[int]:
        return sorted(self.clusters)

    def centroid_matrix(self, type_id: int) -> np.ndarray:
        mat = self._centroids.get(type_id)
        if mat is None:
            mat = np.stack([c.centroid for c in self.clusters[type_id]]).astype(np.float64)
            self._centroids[type_id] = mat
        return mat

    def nearest(self, type_id: int, query) -> tuple[int, int]:
        """Index of the nearest cluster of one type and the number of centroids scanned."""
        mat = self.centroid_matrix(int(type_id))
        idx, _ = nearest_centroid(query, mat)
        return idx, len(mat)

    def total_clusters(self) -> int:
        return sum(len(v) for v in self.clusters.values())


def _fit_type(type_id, vectors, ids, m, seed, max_iters):
    g = num_clusters_for(len(ids), m)
    ss = np.random.SeedSequence([seed, int(type_id)])
    _, assign = kmeans_fit(vectors, g, max_iters=max_iters, seed=int(ss.generate_state(1)[0]))
    clusters = []
    for j in range(int(assign.max()) + 1):
        members = np.flatnonzero(assign == j)
        clusters.append(make_cluster(type_id, vectors[members], ids[members]))
    return clusters


def build_type_clusters(
    grouped: Mapping[int, tuple[np.ndarray, np.ndarray]],
    m: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    threads: int = 1,
) -> TypeClusterMap:
    """Cluster each type's occurrences into ``max(1, f // m)`` groups.

    ``grouped`` maps a type id to ``(vectors, global_ids)`` of its occurrences.
    """
    if m < 1:
        raise UsageError(f"m must be >= 1, got {m}")
    if not grouped:
        raise UsageError("no token types to cluster")
    dim = next(iter(grouped.values()))[0].shape[1]
    items = sorted(grouped.items())

    def work(item):
        type_id, (vectors, ids) = item
        return _fit_type(type_id, np.asarray(vectors), np.asarray(ids, dtype=np.int64), m, seed, max_iters)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]
    clusters = {int(t): cl for (t, _), cl in zip(items, results)}
    logger.debug("clustered %d types into %d clusters", len(clusters), sum(map(len, results)))
    return TypeClusterMap(clusters, m, dim)


def write_clusters(w: binfmt.Writer, cmap: TypeClusterMap) -> None:
    w.u64(cmap.m)
    w.u64(len(cmap.clusters))
    for type_id in cmap.types():
        clusters = cmap.clusters[type_id]
        w.u64(type_id)
        w.u32(len(clusters))
        for c in clusters:
            _write_cluster(w, c)


def _write_cluster(w: binfmt.Writer, c: TypeCluster) -> None:
    w.u64(len(c.member_ids))
    w.f32s(c.centroid)
    w.u64s(c.member_ids)
    w.f32s(c.member_dists)


def _read_cluster(r: binfmt.Reader, type_id: int, dim: int) -> TypeCluster:
    count = r.u64()
    centroid = r.f32s(dim)
    ids = r.u64s(count)
    dists = r.f32s(count)
    return TypeCluster(type_id, centroid, ids, dists)


def read_clusters(r: binfmt.Reader, dim: int) -> TypeClusterMap:
    m = r.u64()
    n_types = r.u64()
    clusters = {}
    for _ in range(n_types):
        type_id = r.u64()
        g = r.u32()
        clusters[type_id] = [_read_cluster(r, type_id, dim) for _ in range(g)]
    return TypeClusterMap(clusters, m, dim)


def save_clusters(path, cmap: TypeClusterMap) -> None:
    w = binfmt.Writer()
    w.header(cmap.dim, binfmt.FLAVOR_CLUSTERS)
    write_clusters(w, cmap)
    binfmt.atomic_write(path, w.getvalue())


def load_clusters(path) -> TypeClusterMap:
    with open(path, "rb") as fh:
        r = binfmt.Reader(fh.read())
    dim, _ = r.header(binfmt.FLAVOR_CLUSTERS)
    cmap = read_clusters(r, dim)
    r.finish()
    return cmap
