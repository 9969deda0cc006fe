import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasterknn.errors import ConfigError, StoreFormatError
from fasterknn.synth import (
    ParallelCorpus,
    SynthEncoder,
    VocabSpec,
    base_prob,
    dictionary_accuracy,
    encode_context,
    encode_contexts,
    encode_source,
    gen_corpus,
    gen_sentences,
    infer_dictionary,
    output_embeddings,
    read_corpus,
    write_corpus,
)

A, B, C = 1, 2, 3


class TestVocabSpec:
    def test_rejects_zero_vocab(self):
        with pytest.raises(ConfigError):
            VocabSpec(0, 5, {})

    def test_rejects_partial_dictionary(self):
        with pytest.raises(ConfigError):
            VocabSpec(2, 2, {1: 1})

    @pytest.mark.parametrize("noise", [-0.1, 1.5])
    def test_rejects_noise_out_of_range(self, noise):
        with pytest.raises(ConfigError):
            VocabSpec(1, 1, {1: 1}, noise_rate=noise)

    def test_random_is_a_permutation(self):
        spec = VocabSpec.random(50, seed=2)
        assert sorted(spec.dictionary.values()) == list(range(1, 51))

    def test_random_zero_vocab_is_config_error(self):
        with pytest.raises(ConfigError):
            VocabSpec.random(0)


class TestGenCorpus:
    def test_noiseless_two_word_example(self):
        spec = VocabSpec(2, 2, {A: 2, B: 1})
        corpus = gen_corpus(spec, 50, 4, seed=0)
        for (src, tgt), links in zip(corpus.pairs, corpus.alignments):
            assert tgt.tolist() == [spec.dictionary[int(s)] for s in src]
            assert links == [(i, i) for i in range(len(src))]

    def test_deterministic(self, small_spec):
        a = gen_corpus(small_spec, 100, 8, seed=9)
        b = gen_corpus(small_spec, 100, 8, seed=9)
        assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a.pairs, b.pairs))
        assert a.alignments == b.alignments

    def test_zipf_top_two_ratio(self):
        spec = VocabSpec.random(200, seed=0, zipf_exponent=1.0)
        corpus = gen_corpus(spec, 10_000, 19, seed=1)
        freq = np.sort(np.bincount(np.concatenate(corpus.sources)))[::-1]
        assert freq[0] / freq[1] == pytest.approx(2.0, abs=0.3)

    def test_noiseless_dictionary_accuracy_is_total(self, small_spec, small_corpus):
        assert dictionary_accuracy(small_corpus, small_spec) == 1.0

    def test_noise_lowers_accuracy(self):
        spec = VocabSpec.random(40, seed=1, noise_rate=0.3)
        corpus = gen_corpus(spec, 500, 10, seed=2)
        assert 0.6 < dictionary_accuracy(corpus, spec) < 0.8

    def test_lengths_and_ids_in_range(self, small_spec, small_corpus):
        for src, tgt in small_corpus.pairs:
            assert 1 <= len(src) <= 9 and len(src) == len(tgt)
            assert src.min() >= 1 and src.max() <= small_spec.source_size
            assert tgt.min() >= 1

    def test_gen_sentences_respects_allowed_types(self, small_spec):
        corpus = gen_sentences(small_spec, 20, 6, seed=1, allowed_types=[4, 7])
        assert all(len(s) == 6 and set(s.tolist()) <= {4, 7} for s in corpus.sources)


class TestCorpusFile:
    def test_round_trip(self, tmp_path, small_corpus):
        path = tmp_path / "c.tsv"
        write_corpus(path, small_corpus)
        back = read_corpus(path)
        assert len(back) == len(small_corpus)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(back.pairs, small_corpus.pairs))
        assert back.alignments == small_corpus.alignments

    def test_line_format(self, tmp_path):
        spec = VocabSpec(2, 2, {A: 2, B: 1})
        corpus = ParallelCorpus([(np.array([A, B]), np.array([2, 1]))], [[(0, 0), (1, 1)]])
        write_corpus(tmp_path / "c.tsv", corpus)
        assert (tmp_path / "c.tsv").read_text() == "1 2\t2 1\t0-0 1-1\n"
        assert dictionary_accuracy(corpus, spec) == 1.0

    @pytest.mark.parametrize("line", ["1 2\t2 1\n", "1 x\t2 1\t0-0\n", "1 2\t2 1\t0-5\n"])
    def test_malformed(self, tmp_path, line):
        path = tmp_path / "bad.tsv"
        path.write_text(line)
        with pytest.raises(StoreFormatError):
            read_corpus(path)

    def test_empty_sentence_rejected(self):
        with pytest.raises(ConfigError):
            ParallelCorpus([(np.array([], dtype=np.int64), np.array([1]))], [[]])


class TestEncoder:
    def test_single_token_is_base_embedding(self):
        enc = SynthEncoder(32, seed=1)
        out = encode_source(enc, [A])
        e = enc.source_embeddings([A])[0]
        np.testing.assert_allclose(out[0], e / np.linalg.norm(e), atol=1e-12)

    def test_reference_formula(self):
        enc = SynthEncoder(8, seed=2, mix_decay=0.5)
        e = enc.source_embeddings([A, B, C])
        expected = np.array([e[0], e[1] + 0.5 * e[0], e[2] + 0.5 * e[1]])
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        np.testing.assert_allclose(encode_source(enc, [A, B, C]), expected, atol=1e-12)

    def test_same_token_same_predecessor(self):
        enc = SynthEncoder(16)
        out = encode_source(enc, [A, B, C, A, B])
        assert np.array_equal(out[1], out[4])

    def test_predecessor_changes_vector_but_shares_base(self):
        enc = SynthEncoder(64, seed=3)
        b1 = encode_source(enc, [A, B])[1]
        b2 = encode_source(enc, [C, B])[1]
        assert not np.allclose(b1, b2)
        assert float(b1 @ b2) > 0

    def test_empty_prefix_single_token_source(self):
        enc = SynthEncoder(16, seed=4)
        src = encode_source(enc, [A])
        mean = src.mean(axis=0)
        np.testing.assert_allclose(encode_context(enc, [A], []), mean / np.linalg.norm(mean), atol=1e-12)

    def test_context_bit_identical(self):
        enc = SynthEncoder(16, seed=4)
        assert encode_context(enc, [A, B], [C]).tobytes() == encode_context(enc, [A, B], [C]).tobytes()

    def test_prefixes_give_distinct_contexts(self):
        enc = SynthEncoder(16, seed=4)
        assert not np.allclose(encode_context(enc, [A, B], [A]), encode_context(enc, [A, B], [B]))

    def test_encode_contexts_rows_match_single_calls(self):
        enc = SynthEncoder(16, seed=4)
        src, tgt = [A, B, C], [3, 1, 2]
        rows = encode_contexts(enc, src, tgt)
        for i in range(len(tgt) + 1):
            np.testing.assert_array_equal(rows[i], encode_context(enc, src, tgt[:i]))

    def test_reseeded_encoder_is_bit_identical(self):
        a = encode_contexts(SynthEncoder(16, seed=9), [A, B], [1, 2])
        b = encode_contexts(SynthEncoder(16, seed=9), [A, B], [1, 2])
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.integers(1, 40), min_size=1, max_size=12),
        st.lists(st.integers(1, 40), max_size=12),
    )
    def test_unit_norm(self, src, tgt):
        enc = SynthEncoder(16, seed=0)
        assert np.allclose(np.linalg.norm(encode_source(enc, src), axis=1), 1.0, atol=1e-9)
        assert np.allclose(np.linalg.norm(encode_contexts(enc, src, tgt), axis=1), 1.0, atol=1e-9)

    def test_rejects_empty_sentence(self):
        with pytest.raises(ConfigError):
            encode_source(SynthEncoder(4), [])


class TestBaseProb:
    def test_zero_h_is_uniform(self):
        E = np.random.default_rng(0).standard_normal((7, 5))
        np.testing.assert_allclose(base_prob(np.zeros(5), E), np.full(7, 1 / 7), atol=1e-15)

    def test_matching_row_wins(self):
        E = np.eye(4)
        p = base_prob(E[2], E)
        assert int(np.argmax(p)) == 2 and np.sum(p == p.max()) == 1

    def test_analytic_softmax(self):
        E = np.array([[0.0], [math.log(2)], [math.log(4)]])
        np.testing.assert_allclose(base_prob(np.array([1.0]), E), [1 / 7, 2 / 7, 4 / 7], atol=1e-12)

    def test_thousand_random_h_normalized(self):
        rng = np.random.default_rng(7)
        E = rng.standard_normal((50, 16)) * 5
        for _ in range(1000):
            p = base_prob(rng.standard_normal(16) * 3, E)
            assert p.min() >= 0 and abs(p.sum() - 1.0) < 1e-9


class TestBaseModel:
    def test_output_rows_average_preimages(self):
        enc = SynthEncoder(8, seed=1)
        out = output_embeddings(enc, {1: 2, 2: 2, 3: 1}, 3, scale=1.0)
        e = enc.source_embeddings([1, 2, 3])
        np.testing.assert_allclose(out[2], (e[0] + e[1]) / 2)
        np.testing.assert_allclose(out[1], e[2])
        assert not out[0].any() and not out[3].any()

    def test_infer_dictionary_recovers_noiseless_map(self, small_spec, small_corpus):
        inferred = infer_dictionary(small_corpus)
        assert all(inferred[s] == small_spec.dictionary[s] for s in inferred)
