"""Product quantization with asymmetric (raw query vs. code) distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binfmt
from .annindex import NeighborSet
from .clusterstore import kmeans_fit
from .errors import ConfigError, UsageError


@dataclass(eq=False)
class PQCodebook:
    M: int
    ksub: int
    sub_dim: int
    codebooks: np.ndarray  # (M, ksub, sub_dim)

    @property
    def dim(self) -> int:
        return self.M * self.sub_dim

    def _blocks(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise UsageError(f"vector dimension {x.shape[-1]} does not match codebook dimension {self.dim}")
        return x.reshape(*x.shape[:-1], self.M, self.sub_dim)


def pq_train(vectors, M: int, ksub: int = 256, seed: int = 0, max_iters: int = 25) -> PQCodebook:
    """Independent k-means per sub-block (fewer distinct blocks than ksub pad by repetition)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConfigError("pq_train needs a non-empty (n, d) array")
    d = x.shape[1]
    if M < 1 or d % M:
        raise ConfigError(f"M={M} does not divide d={d}")
    if ksub < 1:
        raise ConfigError(f"ksub must be >= 1, got {ksub}")
    sub_dim = d // M
    books = np.empty((M, ksub, sub_dim))
    for m in range(M):
        block = x[:, m * sub_dim : (m + 1) * sub_dim]
        cents, _ = kmeans_fit(block, ksub, max_iters=max_iters, seed=seed + m)
        if len(cents) < ksub:
            # duplicates of the last codeword are never chosen (ties go low)
            cents = np.vstack([cents, np.repeat(cents[-1:], ksub - len(cents), axis=0)])
        books[m] = cents
    return PQCodebook(M, ksub, sub_dim, books)


def pq_encode_many(cb: PQCodebook, x) -> np.ndarray:
    blocks = cb._blocks(np.atleast_2d(x))
    codes = np.empty((len(blocks), cb.M), dtype=np.int64)
    c_sq = (cb.codebooks ** 2).sum(axis=2)
    for m in range(cb.M):
        b = blocks[:, m, :]
        d2 = (b * b).sum(1)[:, None] - 2.0 * b @ cb.codebooks[m].T + c_sq[m][None, :]
        codes[:, m] = np.argmin(d2, axis=1)
    return codes


def pq_encode(cb: PQCodebook, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise UsageError("pq_encode takes a single vector; use pq_encode_many for batches")
    return pq_encode_many(cb, x)[0]


def pq_decode(cb: PQCodebook, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    parts = cb.codebooks[np.arange(cb.M), codes]
    return parts.reshape(*codes.shape[:-1], cb.dim)


def adc_table(cb: PQCodebook, q) -> np.ndarray:
    """Squared distance from each query sub-block to every sub-codeword, ``(M, ksub)``."""
    qb = cb._blocks(q)
    diff = cb.codebooks - qb[:, None, :]
    return (diff * diff).sum(axis=2)


def adc_distances(cb: PQCodebook, q, codes) -> np.ndarray:
    table = adc_table(cb, q)
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    return np.sqrt(table[np.arange(cb.M), codes].sum(axis=1))


def adc_distance(cb: PQCodebook, q, code) -> float:
    return float(adc_distances(cb, q, np.asarray(code)[None, :])[0])


def distortion(cb: PQCodebook, vectors) -> float:
    """Summed squared reconstruction error over ``vectors``."""
    x = np.asarray(vectors, dtype=np.float64)
    diff = x - pq_decode(cb, pq_encode_many(cb, x))
    return float((diff * diff).sum())


class PQIndex:
    """Flat scan over PQ codes scored with ADC."""

    def __init__(self, codebook: PQCodebook, codes, payloads) -> None:
        self.codebook = codebook
        self.codes = np.asarray(codes, dtype=np.int64)
        self.payloads = np.asarray(payloads, dtype=np.int64)

    @classmethod
    def from_vectors(cls, codebook: PQCodebook, vectors, payloads) -> "PQIndex":
        return cls(codebook, pq_encode_many(codebook, vectors), payloads)

    def __len__(self) -> int:
        return len(self.codes)

    def search(self, q, k: int) -> NeighborSet:
        if k < 1:
            raise UsageError(f"k must be >= 1, got {k}")
        if len(self) == 0:
            raise UsageError("search on an empty index")
        dists = adc_distances(self.codebook, q, self.codes)
        k = min(k, len(dists))
        if k < len(dists):
            kth = np.partition(dists, k - 1)[k - 1]
            cand = np.flatnonzero(dists <= kth)
        else:
            cand = np.arange(len(dists))
        order = cand[np.lexsort((self.payloads[cand], dists[cand]))][:k]
        return NeighborSet(dists[order], self.payloads[order], dist_ops=len(self))


def write_codebook(w: binfmt.Writer, cb: PQCodebook) -> None:
    w.u32(cb.M)
    w.u32(cb.ksub)
    w.u32(cb.sub_dim)
    w.f32s(cb.codebooks.ravel())


def read_codebook(r: binfmt.Reader) -> PQCodebook:
    M, ksub, sub_dim = r.u32(), r.u32(), r.u32()
    books = r.f32s(M * ksub * sub_dim).astype(np.float64).reshape(M, ksub, sub_dim)
    return PQCodebook(M, ksub, sub_dim, books)
