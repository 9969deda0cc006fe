"""Exact and IVF nearest-neighbour search over float32 vectors.

Scoring runs a float32 matrix product to shortlist candidates, then re-scores
the shortlist in float64, so results are exact L2 top-k (ties to the lower
payload id) while the bulk arithmetic stays in BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clusterstore import kmeans_fit
from .errors import UsageError

FULL_SCALE_FREQ_THRESHOLD = 30_000
DESK_FREQ_THRESHOLD = 2_000

_F32_EPS = float(np.finfo(np.float32).eps)


@dataclass(eq=False)
class NeighborSet:
    """Retrieved neighbours, ascending by distance.

    ``ids`` are index payloads; ``values`` are target token ids once a
    datastore has resolved them. ``dist_ops`` counts distance evaluations.
    """

    distances: np.ndarray
    ids: np.ndarray
    values: np.ndarray | None = None
    dist_ops: int = 0

    def __len__(self) -> int:
        return len(self.distances)

    @classmethod
    def empty(cls) -> "NeighborSet":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def exact_l2(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = np.asarray(vectors, dtype=np.float64) - q
    return np.sqrt((diff * diff).sum(axis=1))


def _topk(vectors, sqnorms, max_norm, ids, q, k):
    """Exact top-k rows of ``vectors``; returns (distances, row positions)."""
    n = len(vectors)
    q = np.asarray(q, dtype=np.float64)
    k = min(k, n)
    if n <= 4 * k or n <= 256:
        cand = np.arange(n)
    else:
        approx = sqnorms - 2.0 * (vectors @ q.astype(np.float32)).astype(np.float64) + q @ q
        kth = np.partition(approx, k - 1)[k - 1]
        tol = 4.0 * vectors.shape[1] * _F32_EPS * max_norm * (float(np.sqrt(q @ q)) + 1.0) + 1e-12
        cand = np.flatnonzero(approx <= kth + tol)
    dists = exact_l2(vectors[cand], q)
    order = np.lexsort((ids[cand], dists))[:k]
    return dists[order], cand[order]


class BruteIndex:
    """Flat index: every query scans all N vectors."""

    def __init__(self, vectors, payloads) -> None:
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.payloads = np.asarray(payloads, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.payloads) != len(self.vectors):
            raise UsageError("need an (N, d) array and N payloads")
        v64 = self.vectors.astype(np.float64)
        self.sqnorms = (v64 * v64).sum(axis=1)
        self.max_norm = float(np.sqrt(self.sqnorms.max())) if len(v64) else 0.0

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, q, k: int) -> NeighborSet:
        return brute_knn(self, q, k)


def brute_knn(index: BruteIndex, q, k: int) -> NeighborSet:
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise UsageError("search on an empty index")
    dists, rows = _topk(index.vectors, index.sqnorms, index.max_norm, index.payloads, q, k)
    return NeighborSet(dists, index.payloads[rows], dist_ops=len(index))


class IvfIndex:
    """Coarse k-means quantizer with per-cell posting lists stored contiguously."""

    def __init__(self, centroids, vectors, payloads, offsets, nprobe: int = 1) -> None:
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.payloads = np.asarray(payloads, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        v64 = self.vectors.astype(np.float64)
        self.sqnorms = (v64 * v64).sum(axis=1)
        self.max_norm = float(np.sqrt(self.sqnorms.max())) if len(v64) else 0.0
        self.nprobe = min(max(1, nprobe), self.nlist)

    @property
    def nlist(self) -> int:
        return len(self.centroids)

    def __len__(self) -> int:
        return len(self.vectors)

    def list_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def search(self, q, k: int) -> NeighborSet:
        """Probe ``nprobe`` cells, widening until at least ``k`` vectors are scanned."""
        return ivf_search(self, q, k, self.nprobe, min_candidates=k)


def ivf_build(
    vectors,
    payloads,
    nlist: int,
    seed: int = 0,
    nprobe: int = 1,
    train_size: int | None = None,
) -> IvfIndex:
    """Train coarse centroids on a seeded sample, then file every vector."""
    vectors = np.asarray(vectors, dtype=np.float32)
    payloads = np.asarray(payloads, dtype=np.int64)
    if nlist < 1:
        raise UsageError(f"nlist must be >= 1, got {nlist}")
    if len(vectors) == 0:
        raise UsageError("cannot build an IVF index over zero vectors")
    n = len(vectors)
    train_size = min(n, train_size or 64 * nlist)
    rng = np.random.default_rng(seed)
    sample = np.sort(rng.choice(n, size=train_size, replace=False)) if train_size < n else np.arange(n)
    centroids, _ = kmeans_fit(vectors[sample], nlist, seed=seed)
    v64 = vectors.astype(np.float64)
    d2 = ((v64 * v64).sum(1)[:, None] - 2.0 * v64 @ centroids.T + (centroids * centroids).sum(1)[None, :])
    cell = np.argmin(d2, axis=1)
    order = np.lexsort((payloads, cell))
    counts = np.bincount(cell, minlength=len(centroids))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return IvfIndex(centroids, vectors[order], payloads[order], offsets, nprobe)


def ivf_search(index: IvfIndex, q, k: int, nprobe: int, min_candidates: int = 0) -> NeighborSet:
    """Exact top-k over the posting lists of the ``nprobe`` nearest cells.

    With ``min_candidates`` further cells are probed in distance order until
    that many vectors have been scanned (or the index is exhausted).
    """
    if not 1 <= nprobe <= index.nlist:
        raise UsageError(f"nprobe must lie in [1, {index.nlist}], got {nprobe}")
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    q = np.asarray(q, dtype=np.float64)
    cdist = exact_l2(index.centroids, q)
    ranked = np.argsort(cdist, kind="stable")
    sizes = index.list_sizes()[ranked]
    if min_candidates > 0:
        reach = int(np.searchsorted(np.cumsum(sizes), min(min_candidates, len(index)))) + 1
        nprobe = max(nprobe, min(reach, index.nlist))
    cells = ranked[:nprobe]
    rows = np.concatenate([np.arange(index.offsets[c], index.offsets[c + 1]) for c in cells])
    ops = index.nlist + len(rows)
    if len(rows) == 0:
        return NeighborSet(np.zeros(0), np.zeros(0, dtype=np.int64), dist_ops=ops)
    dists, pos = _topk(index.vectors[rows], index.sqnorms[rows], index.max_norm, index.payloads[rows], q, k)
    return NeighborSet(dists, index.payloads[rows][pos], dist_ops=ops)


def route_search(type_freq: int, threshold: int = FULL_SCALE_FREQ_THRESHOLD) -> str:
    """``"brute"`` below the frequency threshold, ``"ivf"`` at or above it."""
    return "brute" if type_freq < threshold else "ivf"
