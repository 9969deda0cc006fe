"""Retrieval-augmented decoding with five neighbour-search strategies.

``vanilla`` searches the full datastore, ``fast`` a per-sentence store of the
top-c same-type neighbours, ``faster`` a per-sentence cluster store ranked by
cached centroid distances. The two ablations swap one piece each:
``fast_with_faster_source`` feeds the cluster-selected source store into the
fast decoder, ``faster_no_cache`` ranks the chosen cluster by exact distance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .annindex import DESK_FREQ_THRESHOLD, NeighborSet, exact_l2
from .clusterstore import TypeClusterMap, build_type_clusters, nearest_centroid
from .datastore import (
    AlignmentMap,
    FasterClusterStore,
    FastTargetStore,
    VanillaStore,
    build_faster_cluster_store,
    build_fast_source,
    build_fast_source_from_clusters,
    build_type_indices,
    build_vanilla,
    encode_training_sources,
    map_tokens_to_target,
    precompute_target_clusters,
)
from .errors import ConfigError
from .synth import EOS, ParallelCorpus, SynthEncoder, base_prob, encode_context, infer_dictionary, output_embeddings

STRATEGIES = ("vanilla", "fast", "faster", "fast_with_faster_source", "faster_no_cache")


@dataclass
class DecodeConfig:
    k: int = 16
    temperature: float = 1.0
    lam: float = 0.5
    strategy: str = "faster"
    max_len: int | None = None  # None: source length
    beam: int = 1
    squared_l2: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if self.beam < 1:
            raise ConfigError(f"beam must be >= 1, got {self.beam}")


@dataclass
class StepTrace:
    strategy: str
    candidates: int
    dist_ops: int
    elapsed_ns: int
    token: int
    search_ns: int = 0


# -- retrieval steps -----------------------------------------------------------


def faster_knn_step(h, store: FasterClusterStore, k: int) -> NeighborSet:
    """Nearest target centroid, then its cached ranking.

    Each neighbour's distance is d(centroid, h) + cached d(centroid, member).
    """
    if store.n == 0:
        return NeighborSet.empty()
    l, cdist = nearest_centroid(h, store.centroids)
    cl = store.target_clusters[l]
    k = min(k, len(cl))
    return NeighborSet(
        cdist[l] + cl._ranked_dists[:k],
        cl._ranked_ids[:k],
        cl._ranked_values[:k],
        dist_ops=store.n,
    )


def faster_no_cache_step(h, store: FasterClusterStore, k: int) -> NeighborSet:
    """Same cluster choice as :func:`faster_knn_step`, members ranked by exact L2."""
    if store.n == 0:
        return NeighborSet.empty()
    l, _ = nearest_centroid(h, store.centroids)
    cl = store.target_clusters[l]
    dists = exact_l2(cl.member_vectors, np.asarray(h, dtype=np.float64))
    order = np.lexsort((cl.member_ids, dists))[:k]
    return NeighborSet(dists[order], cl.member_ids[order], cl.values[order], dist_ops=store.n + len(cl))


def fast_knn_step(h, target_store: FastTargetStore, k: int) -> NeighborSet:
    if len(target_store) == 0:
        return NeighborSet.empty()
    ns = target_store.index.search(h, k)
    ns.values = target_store.values[ns.ids]
    return ns


def vanilla_knn_step(h, vanilla_store: VanillaStore, k: int) -> NeighborSet:
    return vanilla_store.search(h, k)


def decoupled_distance(h, cluster, position: int) -> float:
    """Centroid-routed distance estimate for one member of a target cluster."""
    diff = np.asarray(cluster.centroid, dtype=np.float64) - np.asarray(h, dtype=np.float64)
    return float(np.sqrt(diff @ diff) + float(cluster.member_dists[position]))


# -- scoring -------------------------------------------------------------------


def p_knn(ns: NeighborSet, temperature: float, vocab_size: int, squared: bool = False) -> np.ndarray:
    """Softmax over negative distances, aggregated per value token.

    An empty neighbour set yields an all-zero vector; callers should then
    fall back to the base model for that step.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    out = np.zeros(vocab_size)
    if len(ns) == 0:
        return out
    d = np.asarray(ns.distances, dtype=np.float64)
    if squared:
        d = d * d
    logits = -d / temperature
    w = np.exp(logits - logits.max())
    np.add.at(out, np.asarray(ns.values, dtype=np.int64), w)
    return out / w.sum()


def interpolate(p_knn_vec, p_mt_vec, lam: float) -> np.ndarray:
    return lam * np.asarray(p_knn_vec) + (1.0 - lam) * np.asarray(p_mt_vec)


def token_accuracy(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Per-position exact match over reference positions, in percent."""
    hits = total = 0
    for hyp, ref in zip(hyps, refs):
        total += len(ref)
        hits += sum(1 for a, b in zip(hyp, ref) if int(a) == int(b))
    return 100.0 * hits / total if total else 0.0


# -- resources and decoding ----------------------------------------------------


@dataclass(eq=False)
class KnnResources:
    """Everything the strategies read at decode time; read-only once built."""

    encoder: SynthEncoder
    output_emb: np.ndarray
    vanilla: VanillaStore | None = None
    alignment: AlignmentMap | None = None
    type_indices: dict | None = None
    clusters: TypeClusterMap | None = None
    target_cache: dict = field(default_factory=dict)
    c: int = 16

    @property
    def vocab_size(self) -> int:
        return len(self.output_emb)

    def check(self, strategy: str) -> None:
        needed = {
            "vanilla": ("vanilla",),
            "fast": ("vanilla", "alignment", "type_indices"),
            "faster": ("vanilla", "alignment", "clusters"),
            "fast_with_faster_source": ("vanilla", "alignment", "clusters"),
            "faster_no_cache": ("vanilla", "alignment", "clusters"),
        }[strategy]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"strategy {strategy!r} needs {', '.join(missing)}, which were not built")


def build_resources(
    corpus: ParallelCorpus,
    encoder: SynthEncoder,
    *,
    dictionary: dict[int, int] | None = None,
    target_size: int | None = None,
    strategies: Sequence[str] = STRATEGIES,
    c: int = 16,
    m: int = 64,
    freq_threshold: int = DESK_FREQ_THRESHOLD,
    nlist: int | None = None,
    nprobe: int = 8,
    seed: int = 0,
    threads: int = 1,
    base_scale: float = 4.0,
) -> KnnResources:
    """Build the stores each requested strategy needs from a training corpus.

    Without an explicit dictionary the base model's output layer uses the
    most frequent aligned translation of each source type.
    """
    dictionary = infer_dictionary(corpus) if dictionary is None else dictionary
    if target_size is None:
        target_size = max(int(max(t.max() for t in corpus.targets)), max(dictionary.values(), default=0))
    res = KnnResources(encoder, output_embeddings(encoder, dictionary, target_size, base_scale), c=c)
    res.vanilla = build_vanilla(corpus, encoder)
    strategies = set(strategies)
    if strategies - {"vanilla"}:
        res.alignment = AlignmentMap.from_corpus(corpus)
        table = encode_training_sources(corpus, encoder)
        if "fast" in strategies:
            res.type_indices = build_type_indices(table, freq_threshold, nlist, nprobe, seed)
        if strategies & {"faster", "faster_no_cache", "fast_with_faster_source"}:
            res.clusters = build_type_clusters(table.group_by_type(), m, seed, threads=threads)
            res.target_cache = precompute_target_clusters(res.clusters, res.alignment, res.vanilla)
    return res


def prepare_store(source, strategy: str, res: KnnResources):
    """Per-sentence datastore for ``strategy`` (the full store for vanilla)."""
    res.check(strategy)
    if strategy == "vanilla":
        return res.vanilla
    if strategy == "fast":
        src = build_fast_source(source, res.encoder, res.type_indices, res.c)
        return map_tokens_to_target(src, res.alignment, res.vanilla)
    if strategy == "fast_with_faster_source":
        src = build_fast_source_from_clusters(source, res.encoder, res.clusters)
        return map_tokens_to_target(src, res.alignment, res.vanilla)
    return build_faster_cluster_store(
        source, res.encoder, res.clusters, res.alignment, res.vanilla, res.target_cache
    )


_STEP = {
    "vanilla": vanilla_knn_step,
    "fast": fast_knn_step,
    "fast_with_faster_source": fast_knn_step,
    "faster": faster_knn_step,
    "faster_no_cache": faster_no_cache_step,
}


def _store_size(strategy, store) -> int:
    if strategy in ("faster", "faster_no_cache"):
        return store.n
    return len(store)


def next_distribution(h, store, cfg: DecodeConfig, res: KnnResources) -> tuple[np.ndarray, NeighborSet, int]:
    """Interpolated next-token distribution, the neighbours and the search time in ns."""
    p_mt = base_prob(h, res.output_emb)
    t0 = time.perf_counter_ns()
    ns = _STEP[cfg.strategy](h, store, cfg.k)
    search_ns = time.perf_counter_ns() - t0
    if len(ns) == 0 or cfg.lam == 0.0:
        return p_mt, ns, search_ns
    pk = p_knn(ns, cfg.temperature, res.vocab_size, cfg.squared_l2)
    return interpolate(pk, p_mt, cfg.lam), ns, search_ns


def translate(source, cfg: DecodeConfig, res: KnnResources, store=None) -> tuple[list[int], list[StepTrace]]:
    """Greedy (beam=1) or beam decoding until EOS or ``max_len`` tokens.

    Beam hypotheses are scored by summed log-probability; ties go to the
    earlier hypothesis, then the lower token id.
    """
    source = np.asarray(source, dtype=np.int64)
    if store is None:
        store = prepare_store(source, cfg.strategy, res)
    max_len = cfg.max_len or len(source)
    size = _store_size(cfg.strategy, store)
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    traces: list[StepTrace] = []
    for _ in range(max_len):
        t0 = time.perf_counter_ns()
        candidates = []
        ops = search_ns = 0
        for bi, (prefix, score) in enumerate(beams):
            h = encode_context(res.encoder, source, prefix)
            p, ns, spent = next_distribution(h, store, cfg, res)
            ops += ns.dist_ops
            search_ns += spent
            if cfg.beam == 1:
                tok = int(np.argmax(p))
                candidates.append((score + _log(p[tok]), bi, tok))
                continue
            with np.errstate(divide="ignore"):
                logp = np.log(p)
            for tok in np.argsort(-logp, kind="stable")[: cfg.beam]:
                candidates.append((score + float(logp[tok]), bi, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, bi, tok in candidates[: cfg.beam]:
            prefix = beams[bi][0]
            if tok == EOS:
                finished.append((prefix, score))
            else:
                live.append((prefix + [tok], score))
        traces.append(
            StepTrace(
                cfg.strategy, size * len(beams), ops, time.perf_counter_ns() - t0, candidates[0][2], search_ns
            )
        )
        beams = live
        if not beams:
            break
    pool = finished + beams
    best = max(range(len(pool)), key=lambda i: (pool[i][1], -i))
    return pool[best][0], traces


def _log(x: float) -> float:
    return float(np.log(x)) if x > 0 else float("-inf")


def translate_corpus(sources, cfg: DecodeConfig, res: KnnResources) -> tuple[list[list[int]], list[list[StepTrace]]]:
    hyps, traces = [], []
    for src in sources:
        hyp, tr = translate(src, cfg, res)
        hyps.append(hyp)
        traces.append(tr)
    return hyps, traces
