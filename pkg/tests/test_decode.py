import math

import numpy as np
import pytest

from fasterknn.annindex import BruteIndex, NeighborSet, brute_knn
from fasterknn.clusterstore import make_cluster
from fasterknn.datastore import FasterClusterStore, TargetCluster, member_distances
from fasterknn.decode import (
    STRATEGIES,
    DecodeConfig,
    KnnResources,
    build_resources,
    decoupled_distance,
    fast_knn_step,
    faster_knn_step,
    faster_no_cache_step,
    interpolate,
    next_distribution,
    p_knn,
    prepare_store,
    token_accuracy,
    translate,
    vanilla_knn_step,
)
from fasterknn.errors import ConfigError
from fasterknn.synth import EOS, SynthEncoder, base_prob, encode_context


def target_cluster(vectors, ids, values):
    vectors = np.asarray(vectors, dtype=np.float32)
    centroid = vectors.astype(np.float64).mean(0).astype(np.float32)
    return TargetCluster(0, 0, centroid, np.asarray(ids), np.asarray(values), vectors,
                         member_distances(vectors, centroid))


def cluster_store(clusters):
    dummy = [make_cluster(0, c.member_vectors, c.member_ids) for c in clusters]
    n = len(clusters)
    return FasterClusterStore(np.zeros(n, np.int64), np.arange(n), dummy, clusters)


@pytest.fixture
def fixture_store():
    """Three target clusters of two members each, d=4."""
    return cluster_store([
        target_cluster([[1, 0, 0, 0], [1.2, 0.2, 0, 0]], [0, 1], [5, 6]),
        target_cluster([[0, 1, 0, 0], [0, 1.5, 0, 0]], [2, 3], [7, 7]),
        target_cluster([[0, 0, 1, 0], [0, 0, 0.9, 0.3]], [4, 5], [8, 9]),
    ])


class TestFasterStep:
    def test_hand_replay(self, fixture_store):
        h = np.array([0.1, 1.3, 0.0, 0.1])
        cents = np.array([[1.1, 0.1, 0, 0], [0, 1.25, 0, 0], [0, 0, 0.95, 0.15]])
        l = int(np.argmin(np.linalg.norm(cents - h, axis=1)))
        assert l == 1
        ns = faster_knn_step(h, fixture_store, 2)
        d_ch = np.linalg.norm(cents[1] - h)
        # both members sit 0.25 from the centroid; tie goes to the lower id
        assert ns.ids.tolist() == [2, 3] and ns.values.tolist() == [7, 7]
        np.testing.assert_allclose(ns.distances, [d_ch + 0.25, d_ch + 0.25], atol=1e-6)
        assert ns.dist_ops == 3

    def test_centroid_member_gives_zero(self):
        store = cluster_store([target_cluster([[1, 1], [1, 1]], [0, 1], [3, 4]),
                               target_cluster([[5, 5]], [2], [6])])
        ns = faster_knn_step(np.array([1.0, 1.0]), store, 1)
        assert ns.distances.tolist() == [0.0]

    def test_small_cluster_returned_whole(self, fixture_store):
        assert len(faster_knn_step(np.zeros(4), fixture_store, 16)) == 2

    def test_empty_store(self):
        assert len(faster_knn_step(np.zeros(2), FasterClusterStore(np.zeros(0), np.zeros(0), [], []), 4)) == 0

    def test_decoupled_distance_formula(self, fixture_store):
        h = np.array([0.3, 0.2, 0.1, 0.0])
        cl = fixture_store.target_clusters[0]
        expected = np.linalg.norm(cl.centroid.astype(np.float64) - h) + cl.member_dists[1]
        assert decoupled_distance(h, cl, 1) == pytest.approx(expected, abs=1e-12)


class TestNoCacheStep:
    def test_singletons_match_faster(self, rng):
        clusters = [target_cluster([v], [i], [i + 1]) for i, v in enumerate(rng.standard_normal((6, 3)))]
        store = cluster_store(clusters)
        for _ in range(20):
            h = rng.standard_normal(3)
            a, b = faster_knn_step(h, store, 1), faster_no_cache_step(h, store, 1)
            assert a.ids.tolist() == b.ids.tolist()
            np.testing.assert_allclose(a.distances, b.distances, atol=1e-9)

    def test_restricted_brute_oracle(self, rng):
        clusters = [target_cluster(rng.standard_normal((9, 4)), np.arange(9) + 10 * j, np.arange(9)) for j in range(4)]
        store = cluster_store(clusters)
        for _ in range(50):
            h = rng.standard_normal(4)
            a = faster_knn_step(h, store, 3)
            b = faster_no_cache_step(h, store, 3)
            chosen = [c for c in clusters if a.ids[0] in c.member_ids][0]
            ref = brute_knn(BruteIndex(chosen.member_vectors, chosen.member_ids), h, 3)
            assert b.ids.tolist() == ref.ids.tolist()
            np.testing.assert_allclose(b.distances, ref.distances, atol=1e-9)
            assert set(b.ids.tolist()) <= set(chosen.member_ids.tolist())
            assert b.dist_ops == 4 + 9 and a.dist_ops == 4

    def test_k1_returns_nearest_member(self, fixture_store):
        h = np.array([0.0, 1.39, 0.0, 0.0])
        assert faster_no_cache_step(h, fixture_store, 1).ids.tolist() == [3]


class TestFastAndVanillaSteps:
    def test_fast_matches_sort_oracle(self, small_corpus, small_encoder, small_resources):
        small_resources.c = 8
        store = prepare_store(small_corpus.sources[2], "fast", small_resources)
        keys = store.keys.astype(np.float64)
        rng = np.random.default_rng(0)
        for _ in range(30):
            h = rng.standard_normal(keys.shape[1])
            ns = fast_knn_step(h, store, 5)
            d = np.linalg.norm(keys - h, axis=1)
            order = sorted(range(len(d)), key=lambda i: (d[i], i))[:5]
            assert ns.ids.tolist() == order
            assert ns.values.tolist() == store.values[order].tolist()
            assert ns.dist_ops == len(store)

    def test_vanilla_fills_values(self, small_resources):
        v = small_resources.vanilla
        ns = vanilla_knn_step(v.keys[10], v, 3)
        assert ns.ids[0] == 10 or ns.distances[0] == 0.0
        assert ns.values.tolist() == v.values[ns.ids].tolist()
        assert ns.dist_ops == len(v)


class TestScoring:
    def test_one_neighbor(self):
        p = p_knn(NeighborSet(np.array([3.0]), np.array([0]), np.array([4])), 1.0, 6)
        assert p.tolist() == [0, 0, 0, 0, 1, 0]

    @pytest.mark.parametrize("T", [0.1, 1.0, 10.0])
    def test_equal_distance_split(self, T):
        p = p_knn(NeighborSet(np.array([2.0, 2.0]), np.array([0, 1]), np.array([1, 2])), T, 3)
        np.testing.assert_allclose(p, [0, 0.5, 0.5], atol=1e-15)

    def test_analytic_three_to_one(self):
        T = 0.7
        p = p_knn(NeighborSet(np.array([0.0, T * math.log(3)]), np.array([0, 1]), np.array([0, 1])), T, 2)
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-12)

    def test_values_aggregate(self):
        p = p_knn(NeighborSet(np.array([1.0, 1.0, 1.0]), np.arange(3), np.array([2, 2, 0])), 1.0, 3)
        np.testing.assert_allclose(p, [1 / 3, 0, 2 / 3], atol=1e-12)

    def test_empty_is_zero(self):
        assert not p_knn(NeighborSet.empty(), 1.0, 4).any()

    def test_squared_option(self):
        ns = NeighborSet(np.array([1.0, 2.0]), np.arange(2), np.array([0, 1]))
        p = p_knn(ns, 1.0, 2, squared=True)
        np.testing.assert_allclose(p, np.exp([-1.0, -4.0]) / np.exp([-1.0, -4.0]).sum())

    def test_interpolate_examples(self):
        pk, pm = np.array([1.0, 0.0]), np.array([0.2, 0.8])
        assert np.array_equal(interpolate(pk, pm, 0.0), pm)
        assert np.array_equal(interpolate(pk, pm, 1.0), pk)
        np.testing.assert_allclose(interpolate(pk, pm, 0.5), [0.6, 0.4], atol=1e-15)

    def test_token_accuracy_clips(self):
        assert token_accuracy([[1, 2, 3, 9]], [[1, 5, 3]]) == pytest.approx(200 / 3)
        assert token_accuracy([[1]], [[1, 2]]) == 50.0


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"k": 0}, {"temperature": 0}, {"lam": 1.5}, {"strategy": "x"},
                                        {"beam": 0}, {"max_len": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DecodeConfig(**kwargs)

    def test_missing_store(self, small_resources):
        bare = KnnResources(small_resources.encoder, small_resources.output_emb, vanilla=small_resources.vanilla)
        with pytest.raises(ConfigError, match="clusters"):
            translate([1, 2], DecodeConfig(strategy="faster"), bare)


def base_only_decode(source, res):
    out = []
    for _ in range(len(source)):
        p = base_prob(encode_context(res.encoder, source, out), res.output_emb)
        tok = int(np.argmax(p))
        if tok == EOS:
            break
        out.append(tok)
    return out


class TestTranslate:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_lambda_zero_is_base_model(self, strategy, small_corpus, small_resources):
        for src in small_corpus.sources[:10]:
            hyp, _ = translate(src, DecodeConfig(strategy=strategy, lam=0.0), small_resources)
            assert hyp == base_only_decode(src, small_resources)

    def test_vanilla_memorizes_training(self, small_corpus, small_resources):
        cfg = DecodeConfig(strategy="vanilla", lam=1.0, k=1)
        hyps = [translate(s, cfg, small_resources)[0] for s in small_corpus.sources[:60]]
        assert token_accuracy(hyps, small_corpus.targets[:60]) == 100.0

    def test_faster_counts_fewer_ops_than_no_cache(self, small_corpus, small_resources):
        src = small_corpus.sources[7]
        _, fast_tr = translate(src, DecodeConfig(strategy="faster"), small_resources)
        _, slow_tr = translate(src, DecodeConfig(strategy="faster_no_cache"), small_resources)
        assert all(a.dist_ops == len(src) for a in fast_tr)
        assert all(a.dist_ops < b.dist_ops for a, b in zip(fast_tr, slow_tr))

    def test_traces(self, small_corpus, small_resources):
        src = small_corpus.sources[1]
        hyp, traces = translate(src, DecodeConfig(strategy="fast"), small_resources)
        assert len(traces) == len(hyp) or traces[-1].token == EOS
        assert all(t.dist_ops >= 0 and t.elapsed_ns >= 0 and t.strategy == "fast" for t in traces)

    def test_max_len_caps_output(self, small_corpus, small_resources):
        src = max(small_corpus.sources, key=len)
        hyp, _ = translate(src, DecodeConfig(strategy="faster", max_len=2), small_resources)
        assert len(hyp) <= 2

    def test_beam_one_equals_greedy_and_beam_is_deterministic(self, small_corpus, small_resources):
        src = small_corpus.sources[4]
        g, _ = translate(src, DecodeConfig(strategy="faster", beam=1), small_resources)
        b1, _ = translate(src, DecodeConfig(strategy="faster", beam=3), small_resources)
        b2, _ = translate(src, DecodeConfig(strategy="faster", beam=3), small_resources)
        assert b1 == b2 and len(g) == len(src)

    def test_beam_scores_at_least_greedy(self, small_corpus, small_resources):
        def score(src, hyp, cfg):
            total, store = 0.0, prepare_store(src, cfg.strategy, small_resources)
            for i, tok in enumerate(hyp):
                h = encode_context(small_resources.encoder, src, hyp[:i])
                p, _, _ = next_distribution(h, store, cfg, small_resources)
                total += math.log(p[tok])
            return total

        for src in small_corpus.sources[20:30]:
            greedy = DecodeConfig(strategy="vanilla", beam=1, lam=0.3)
            beam = DecodeConfig(strategy="vanilla", beam=4, lam=0.3)
            g, _ = translate(src, greedy, small_resources)
            b, _ = translate(src, beam, small_resources)
            if len(g) == len(b):
                assert score(src, b, beam) >= score(src, g, greedy) - 1e-9

    def test_probabilities_normalized(self, small_corpus, small_resources):
        for strategy in STRATEGIES:
            cfg = DecodeConfig(strategy=strategy, lam=0.4, temperature=0.5)
            src = small_corpus.sources[9]
            store = prepare_store(src, strategy, small_resources)
            for i in range(len(src)):
                h = encode_context(small_resources.encoder, src, small_corpus.targets[9][:i])
                p, _, _ = next_distribution(h, store, cfg, small_resources)
                assert p.min() >= 0 and abs(p.sum() - 1.0) < 1e-9

    def test_build_resources_subset(self, small_corpus):
        res = build_resources(small_corpus.subset(range(50)), SynthEncoder(8), strategies=["vanilla"])
        assert res.clusters is None and res.type_indices is None and res.vanilla is not None
