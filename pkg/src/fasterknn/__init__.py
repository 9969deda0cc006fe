"""Nearest-neighbour machine translation with per-type cluster stores.

Three retrieval strategies share one decoding loop: a full datastore scan
(vanilla), per-sentence stores built from per-type neighbour search (fast),
and per-sentence stores of k-means clusters with cached member distances
(faster).
"""

from .annindex import BruteIndex, IvfIndex, NeighborSet, brute_knn, ivf_build, ivf_search, route_search
from .bench import BenchConfig, BenchReport, emit_report, run_bench
from .clusterstore import TypeCluster, TypeClusterMap, build_type_clusters, cached_topk, kmeans_fit, nearest_cluster
from .datastore import (
    AlignmentMap,
    FastSourceStore,
    FasterClusterStore,
    FastTargetStore,
    VanillaStore,
    build_fast_source,
    build_faster_cluster_store,
    build_vanilla,
    load_store,
    map_tokens_to_target,
    save_store,
)
from .decode import (
    STRATEGIES,
    DecodeConfig,
    KnnResources,
    StepTrace,
    build_resources,
    fast_knn_step,
    faster_knn_step,
    faster_no_cache_step,
    interpolate,
    p_knn,
    token_accuracy,
    translate,
    vanilla_knn_step,
)
from .errors import ConfigError, StoreFormatError, UsageError
from .quantize import PQCodebook, adc_distance, pq_encode, pq_train
from .synth import ParallelCorpus, SynthEncoder, VocabSpec, base_prob, encode_context, encode_source, gen_corpus

__version__ = "0.1.0"
