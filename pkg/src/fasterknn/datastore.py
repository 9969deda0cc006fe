"""Datastore construction: the full store, top-c same-type stores and cluster stores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import binfmt
from .alignment import Links, source_to_target
from .annindex import (
    DESK_FREQ_THRESHOLD,
    BruteIndex,
    NeighborSet,
    ivf_build,
    route_search,
)
from .clusterstore import (
    TypeCluster,
    TypeClusterMap,
    _read_cluster,
    _write_cluster,
    member_distances,
    rank_members,
)
from .errors import StoreFormatError, UsageError
from .quantize import PQCodebook, PQIndex, pq_encode_many, read_codebook, write_codebook
from .synth import ParallelCorpus, SynthEncoder, encode_contexts, encode_source

logger = logging.getLogger(__name__)


def _offsets(lengths) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(np.asarray(lengths, dtype=np.int64))]).astype(np.int64)


@dataclass(eq=False)
class AlignmentMap:
    """Gold or ingested links per pair, plus a flat source->target position map."""

    links: list[Links]
    src_offsets: np.ndarray
    tgt_offsets: np.ndarray
    src_to_tgt: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.src_to_tgt = source_to_target(self.links, self.src_offsets, self.tgt_offsets)

    @classmethod
    def from_corpus(cls, corpus: ParallelCorpus, links: Sequence[Links] | None = None) -> "AlignmentMap":
        links = corpus.alignments if links is None else list(links)
        if len(links) != len(corpus):
            raise UsageError(f"{len(links)} alignment lines for {len(corpus)} sentence pairs")
        return cls(
            list(links),
            _offsets([len(s) for s, _ in corpus.pairs]),
            _offsets([len(t) for _, t in corpus.pairs]),
        )


@dataclass(eq=False)
class SourceTable:
    """Every training source token: its representation, type and pair."""

    vectors: np.ndarray  # float32 (N_src, d)
    types: np.ndarray
    offsets: np.ndarray

    def group_by_type(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        order = np.argsort(self.types, kind="stable")
        types_sorted = self.types[order]
        uniq, starts = np.unique(types_sorted, return_index=True)
        bounds = list(starts) + [len(order)]
        return {
            int(t): (self.vectors[order[a:b]], order[a:b].astype(np.int64))
            for t, a, b in zip(uniq, bounds[:-1], bounds[1:])
        }

    def type_frequencies(self) -> dict[int, int]:
        uniq, counts = np.unique(self.types, return_counts=True)
        return {int(t): int(c) for t, c in zip(uniq, counts)}


def encode_training_sources(corpus: ParallelCorpus, encoder: SynthEncoder) -> SourceTable:
    vectors = np.concatenate([encode_source(encoder, src) for src in corpus.sources]).astype(np.float32)
    types = np.concatenate(corpus.sources).astype(np.int64)
    return SourceTable(vectors, types, _offsets([len(s) for s in corpus.sources]))


@dataclass(eq=False)
class VanillaStore:
    """Every target-side translation context mapped to its gold next token."""

    keys: np.ndarray  # float32 (N, d)
    values: np.ndarray
    offsets: np.ndarray  # per-pair start positions into keys
    codebook: PQCodebook | None = None
    codes: np.ndarray | None = None
    index: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if len(self.keys) != len(self.values):
            raise UsageError("keys and values differ in length")
        if self.index is None:
            self.index = self._default_index()

    def _default_index(self):
        payloads = np.arange(len(self.keys))
        if self.codebook is not None:
            return PQIndex(self.codebook, self.codes, payloads)
        return BruteIndex(self.keys, payloads)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def use_ivf(self, nlist: int, nprobe: int = 1, seed: int = 0) -> None:
        self.index = ivf_build(self.keys, np.arange(len(self.keys)), nlist, seed=seed, nprobe=nprobe)

    def use_pq(self, codebook: PQCodebook) -> None:
        self.codebook = codebook
        self.codes = pq_encode_many(codebook, self.keys)
        self.index = self._default_index()

    def search(self, q, k: int) -> NeighborSet:
        ns = self.index.search(q, k)
        ns.values = self.values[ns.ids]
        return ns


def build_vanilla(corpus: ParallelCorpus, encoder: SynthEncoder) -> VanillaStore:
    if len(corpus) == 0:
        raise UsageError("cannot build a datastore from an empty corpus")
    keys = np.concatenate(
        [encode_contexts(encoder, src, tgt)[:-1] for src, tgt in corpus.pairs]
    ).astype(np.float32)
    values = np.concatenate(corpus.targets).astype(np.int64)
    return VanillaStore(keys, values, _offsets([len(t) for t in corpus.targets]))


def build_type_indices(
    table: SourceTable,
    freq_threshold: int = DESK_FREQ_THRESHOLD,
    nlist: int | None = None,
    nprobe: int = 8,
    seed: int = 0,
) -> dict[int, object]:
    """One search index per source type, brute or IVF by frequency.

    IVF indices default to ``nlist = round(sqrt(f))`` cells.
    """
    indices = {}
    for type_id, (vectors, ids) in table.group_by_type().items():
        f = len(ids)
        if route_search(f, freq_threshold) == "brute":
            indices[type_id] = BruteIndex(vectors, ids)
        else:
            cells = min(f, nlist or max(1, int(round(np.sqrt(f)))))
            indices[type_id] = ivf_build(vectors, ids, cells, seed=seed + type_id, nprobe=min(nprobe, cells))
    return indices


@dataclass(eq=False)
class FastSourceStore:
    tokens: np.ndarray
    neighbors: list[np.ndarray]  # global source ids per test token
    c: int
    dist_ops: int = 0

    def __len__(self) -> int:
        return sum(len(nb) for nb in self.neighbors)


def build_fast_source(test_sentence, encoder: SynthEncoder, type_indices, c: int) -> FastSourceStore:
    """Top-c same-type training occurrences for each test source token."""
    if c < 1:
        raise UsageError(f"c must be >= 1, got {c}")
    tokens = np.asarray(test_sentence, dtype=np.int64)
    queries = encode_source(encoder, tokens)
    neighbors, ops = [], 0
    for tok, q in zip(tokens, queries):
        index = type_indices.get(int(tok))
        if index is None:
            logger.warning("source type %d unseen in training; contributes no neighbours", tok)
            neighbors.append(np.zeros(0, dtype=np.int64))
            continue
        ns = index.search(q, c)
        neighbors.append(ns.ids)
        ops += ns.dist_ops
    return FastSourceStore(tokens, neighbors, c, ops)


def build_fast_source_from_clusters(test_sentence, encoder: SynthEncoder, cmap: TypeClusterMap) -> FastSourceStore:
    """Source store whose per-token neighbours are the nearest cluster's members."""
    tokens = np.asarray(test_sentence, dtype=np.int64)
    queries = encode_source(encoder, tokens)
    neighbors, ops = [], 0
    for tok, q in zip(tokens, queries):
        if int(tok) not in cmap:
            logger.warning("source type %d unseen in training; contributes no neighbours", tok)
            neighbors.append(np.zeros(0, dtype=np.int64))
            continue
        idx, scanned = cmap.nearest(int(tok), q)
        neighbors.append(cmap.clusters[int(tok)][idx].member_ids)
        ops += scanned
    return FastSourceStore(tokens, neighbors, 0, ops)


@dataclass(eq=False)
class FastTargetStore:
    keys: np.ndarray  # float32
    values: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    n: int
    c: int
    dropped: int = 0
    _index: BruteIndex | None = field(default=None, init=False, repr=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def index(self) -> BruteIndex:
        if self._index is None:
            self._index = BruteIndex(self.keys, np.arange(len(self.keys)))
        return self._index

    def resident_bytes(self) -> int:
        return int(self.keys.nbytes + self.values.nbytes)


def map_tokens_to_target(
    store: FastSourceStore,
    alignment: AlignmentMap,
    target_states: VanillaStore,
) -> FastTargetStore:
    """Replace every source neighbour by its aligned target context and token."""
    src_ids = np.concatenate(store.neighbors) if store.neighbors else np.zeros(0, dtype=np.int64)
    tgt_ids = alignment.src_to_tgt[src_ids]
    aligned = tgt_ids >= 0
    dropped = int((~aligned).sum())
    if dropped:
        logger.info("dropped %d unaligned source neighbours", dropped)
    src_ids, tgt_ids = src_ids[aligned], tgt_ids[aligned]
    return FastTargetStore(
        target_states.keys[tgt_ids],
        target_states.values[tgt_ids],
        src_ids,
        tgt_ids,
        n=len(store.tokens),
        c=store.c,
        dropped=dropped,
    )


@dataclass(eq=False)
class TargetCluster:
    """Aligned image of one source cluster: contexts, tokens and cached ranks."""

    type_id: int
    source_index: int
    centroid: np.ndarray  # float32
    member_ids: np.ndarray  # global target positions
    values: np.ndarray
    member_vectors: np.ndarray  # float32
    member_dists: np.ndarray  # float32
    rank_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.rank_order is None:
            self.rank_order = rank_members(self.member_dists, self.member_ids)
        self._ranked_dists = self.member_dists[self.rank_order].astype(np.float64)
        self._ranked_values = self.values[self.rank_order]
        self._ranked_ids = self.member_ids[self.rank_order]

    def __len__(self) -> int:
        return len(self.member_ids)


def build_target_cluster(
    source: TypeCluster,
    source_index: int,
    alignment: AlignmentMap,
    target_states: VanillaStore,
) -> TargetCluster | None:
    tgt = alignment.src_to_tgt[source.member_ids]
    tgt = np.unique(tgt[tgt >= 0])
    if len(tgt) == 0:
        return None
    vectors = target_states.keys[tgt]
    centroid = vectors.astype(np.float64).mean(axis=0).astype(np.float32)
    return TargetCluster(
        source.type_id,
        source_index,
        centroid,
        tgt,
        target_states.values[tgt],
        vectors,
        member_distances(vectors, centroid),
    )


@dataclass(eq=False)
class FasterClusterStore:
    tokens: np.ndarray  # test tokens that kept a cluster
    positions: np.ndarray  # their positions in the test sentence
    source_clusters: list[TypeCluster]
    target_clusters: list[TargetCluster]
    dist_ops: int = 0

    def __post_init__(self) -> None:
        if len(self.source_clusters) != len(self.target_clusters):
            raise UsageError("source and target cluster lists must correspond one to one")
        if self.target_clusters:
            self.centroids = np.stack([c.centroid for c in self.target_clusters]).astype(np.float64)
        else:
            self.centroids = np.zeros((0, 0))

    @property
    def n(self) -> int:
        return len(self.target_clusters)

    def resident_bytes(self, with_vectors: bool = False) -> int:
        """Bytes needed at decode time: centroids plus cached member values and dists."""
        total = 0
        for c in self.target_clusters:
            total += c.centroid.nbytes + c.values.nbytes + c.member_dists.nbytes
            if with_vectors:
                total += c.member_vectors.nbytes
        return int(total)


def precompute_target_clusters(
    cmap: TypeClusterMap,
    alignment: AlignmentMap,
    target_states: VanillaStore,
) -> dict[tuple[int, int], TargetCluster | None]:
    """Offline source->target cluster mapping for every cluster in the map."""
    return {
        (t, i): build_target_cluster(cl, i, alignment, target_states)
        for t in cmap.types()
        for i, cl in enumerate(cmap.clusters[t])
    }


def build_faster_cluster_store(
    test_sentence,
    encoder: SynthEncoder,
    cmap: TypeClusterMap,
    alignment: AlignmentMap,
    target_states: VanillaStore,
    cache: dict | None = None,
) -> FasterClusterStore:
    """Nearest same-type cluster per test token, mapped to its target cluster.

    ``cache`` holds target clusters keyed by ``(type_id, cluster_index)``; a
    missing entry is built and stored on first use.
    """
    tokens = np.asarray(test_sentence, dtype=np.int64)
    queries = encode_source(encoder, tokens)
    cache = {} if cache is None else cache
    kept_tokens, positions, sources, targets, ops = [], [], [], [], 0
    for pos, (tok, q) in enumerate(zip(tokens, queries)):
        t = int(tok)
        if t not in cmap:
            logger.warning("source type %d unseen in training; token skipped", t)
            continue
        idx, scanned = cmap.nearest(t, q)
        ops += scanned
        key = (t, idx)
        if key not in cache:
            cache[key] = build_target_cluster(cmap.clusters[t][idx], idx, alignment, target_states)
        target = cache[key]
        if target is None:
            logger.warning("cluster %s has no aligned targets; token skipped", key)
            continue
        kept_tokens.append(t)
        positions.append(pos)
        sources.append(cmap.clusters[t][idx])
        targets.append(target)
    return FasterClusterStore(
        np.asarray(kept_tokens, dtype=np.int64),
        np.asarray(positions, dtype=np.int64),
        sources,
        targets,
        ops,
    )


# -- persistence -------------------------------------------------------------

_FLAVOR_BY_NAME = {name: tag for tag, name in binfmt.FLAVOR_NAMES.items()}


def _write_vanilla(w: binfmt.Writer, s: VanillaStore) -> None:
    w.u64(len(s))
    w.f32s(s.keys)
    w.i64s(s.values)
    w.u64(len(s.offsets))
    w.u64s(s.offsets)
    w.u8(1 if s.codebook is not None else 0)
    if s.codebook is not None:
        write_codebook(w, s.codebook)
        w.u64s(s.codes)


def _read_vanilla(r: binfmt.Reader, d: int) -> VanillaStore:
    n = r.u64()
    keys = r.f32s(n * d).reshape(n, d)
    values = r.i64s(n)
    offsets = r.u64s(r.u64())
    codebook = codes = None
    if r.u8():
        codebook = read_codebook(r)
        codes = r.u64s(n * codebook.M).reshape(n, codebook.M)
    return VanillaStore(keys, values, offsets, codebook, codes)


def _write_fast(w: binfmt.Writer, s: FastTargetStore) -> None:
    for v in (s.n, s.c, s.dropped, len(s)):
        w.u64(v)
    w.f32s(s.keys)
    w.i64s(s.values)
    w.u64s(s.source_ids)
    w.u64s(s.target_ids)


def _read_fast(r: binfmt.Reader, d: int) -> FastTargetStore:
    n, c, dropped, size = r.u64(), r.u64(), r.u64(), r.u64()
    keys = r.f32s(size * d).reshape(size, d)
    return FastTargetStore(keys, r.i64s(size), r.u64s(size), r.u64s(size), n, c, dropped)


def _write_target_cluster(w: binfmt.Writer, c: TargetCluster) -> None:
    w.u64(c.type_id)
    w.u64(c.source_index)
    w.u64(len(c))
    w.f32s(c.centroid)
    w.u64s(c.member_ids)
    w.i64s(c.values)
    w.f32s(c.member_dists)
    w.f32s(c.member_vectors)


def _read_target_cluster(r: binfmt.Reader, d: int) -> TargetCluster:
    type_id, source_index, count = r.u64(), r.u64(), r.u64()
    centroid = r.f32s(d)
    ids, values, dists = r.u64s(count), r.i64s(count), r.f32s(count)
    vectors = r.f32s(count * d).reshape(count, d)
    return TargetCluster(type_id, source_index, centroid, ids, values, vectors, dists)


def _write_faster(w: binfmt.Writer, s: FasterClusterStore) -> None:
    w.u64(s.n)
    w.u64(s.dist_ops)
    w.i64s(s.tokens)
    w.i64s(s.positions)
    for src, tgt in zip(s.source_clusters, s.target_clusters):
        w.u64(src.type_id)
        _write_cluster(w, src)
        _write_target_cluster(w, tgt)


def _read_faster(r: binfmt.Reader, d: int) -> FasterClusterStore:
    n, ops = r.u64(), r.u64()
    tokens, positions = r.i64s(n), r.i64s(n)
    sources, targets = [], []
    for _ in range(n):
        type_id = r.u64()
        sources.append(_read_cluster(r, type_id, d))
        targets.append(_read_target_cluster(r, d))
    return FasterClusterStore(tokens, positions, sources, targets, ops)


def _flavor_of(store) -> str:
    if isinstance(store, VanillaStore):
        return "vanilla"
    items = list(store)
    if items and all(isinstance(s, FastTargetStore) for s in items):
        return "fast"
    if items and all(isinstance(s, FasterClusterStore) for s in items):
        return "faster"
    raise UsageError("save_store takes a VanillaStore or a non-empty list of fast/faster stores")


def _store_dim(flavor: str, store) -> int:
    if flavor == "vanilla":
        return store.dim
    first = store[0]
    if flavor == "fast":
        return first.keys.shape[1]
    for s in store:
        if s.target_clusters:
            return len(s.target_clusters[0].centroid)
    return 0


def dump_store(store) -> bytes:
    flavor = _flavor_of(store)
    w = binfmt.Writer()
    w.header(_store_dim(flavor, store), _FLAVOR_BY_NAME[flavor])
    if flavor == "vanilla":
        _write_vanilla(w, store)
    else:
        w.u64(len(store))
        for s in store:
            (_write_fast if flavor == "fast" else _write_faster)(w, s)
    return w.getvalue()


def parse_store(data: bytes, flavor: str | None = None):
    r = binfmt.Reader(data)
    expect = None if flavor is None else _FLAVOR_BY_NAME[flavor]
    d, tag = r.header(expect)
    name = binfmt.FLAVOR_NAMES[tag]
    if name == "clusters":
        raise StoreFormatError("file holds a cluster map (tag 3), not a datastore; use load_clusters")
    try:
        if name == "vanilla":
            result = _read_vanilla(r, d)
        else:
            reader = _read_fast if name == "fast" else _read_faster
            result = [reader(r, d) for _ in range(r.u64())]
    except (ValueError, UsageError) as exc:
        raise StoreFormatError(f"corrupt {name} store: {exc}") from exc
    r.finish()
    return result


def save_store(path, store) -> None:
    """Persist a VanillaStore, or a list of per-sentence fast/faster stores."""
    binfmt.atomic_write(path, dump_store(store))


def load_store(path, flavor: str | None = None):
    """Inverse of :func:`save_store`; ``flavor`` pins the expected tag."""
    with open(path, "rb") as fh:
        return parse_store(fh.read(), flavor)
