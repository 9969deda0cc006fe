"""Synthetic parallel corpora, a deterministic context encoder and a base model.

Token id 0 is reserved on both sides (end of sentence on the target side);
real source types are ``1..source_size`` and real target types are
``1..target_size``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .alignment import Links, check_links, format_pharaoh, parse_pharaoh
from .binfmt import atomic_write
from .errors import ConfigError, StoreFormatError

EOS = 0

_SOURCE_NS = 1
_TARGET_NS = 2


@dataclass
class VocabSpec:
    source_size: int
    target_size: int
    dictionary: dict[int, int]
    noise_rate: float = 0.0
    zipf_exponent: float = 1.0

    def __post_init__(self) -> None:
        if self.source_size < 1 or self.target_size < 1:
            raise ConfigError(
                f"vocabulary sizes must be positive, got source={self.source_size} "
                f"target={self.target_size}"
            )
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.zipf_exponent <= 0:
            raise ConfigError(f"zipf_exponent must be > 0, got {self.zipf_exponent}")
        missing = [s for s in range(1, self.source_size + 1) if s not in self.dictionary]
        if missing:
            raise ConfigError(f"dictionary is not total: no entry for source types {missing[:5]}")
        bad = [t for t in self.dictionary.values() if not 1 <= t <= self.target_size]
        if bad:
            raise ConfigError(f"dictionary maps to invalid target ids {bad[:5]}")

    @classmethod
    def random(
        cls,
        source_size: int,
        target_size: int | None = None,
        seed: int = 0,
        noise_rate: float = 0.0,
        zipf_exponent: float = 1.0,
    ) -> "VocabSpec":
        """Seeded dictionary; a permutation when both sides have equal size."""
        target_size = source_size if target_size is None else target_size
        if source_size < 1 or target_size < 1:
            raise ConfigError("vocabulary sizes must be positive")
        rng = np.random.default_rng([seed, 0x5EED])
        if target_size >= source_size:
            images = rng.permutation(target_size)[:source_size] + 1
        else:
            images = rng.integers(1, target_size + 1, size=source_size)
        dictionary = {s + 1: int(t) for s, t in enumerate(images)}
        return cls(source_size, target_size, dictionary, noise_rate, zipf_exponent)

    def dictionary_array(self) -> np.ndarray:
        table = np.zeros(self.source_size + 1, dtype=np.int64)
        for s, t in self.dictionary.items():
            table[s] = t
        return table

    def zipf_probs(self) -> np.ndarray:
        ranks = np.arange(1, self.source_size + 1, dtype=np.float64)
        weights = ranks ** -self.zipf_exponent
        return weights / weights.sum()


@dataclass
class ParallelCorpus:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    alignments: list[Links]

    def __post_init__(self) -> None:
        if len(self.pairs) != len(self.alignments):
            raise ConfigError("one alignment entry is required per sentence pair")
        for (src, tgt), links in zip(self.pairs, self.alignments):
            if len(src) == 0 or len(tgt) == 0:
                raise ConfigError("sentences must be non-empty")
            check_links(links, len(src), len(tgt))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[np.ndarray]:
        return [src for src, _ in self.pairs]

    @property
    def targets(self) -> list[np.ndarray]:
        return [tgt for _, tgt in self.pairs]

    def num_target_tokens(self) -> int:
        return sum(len(t) for _, t in self.pairs)

    def subset(self, indices) -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in indices], [self.alignments[i] for i in indices])


def _sample_sentences(spec, lengths, rng, allowed=None):
    probs = spec.zipf_probs()
    if allowed is not None:
        mask = np.zeros(spec.source_size, dtype=bool)
        mask[np.asarray(list(allowed), dtype=np.int64) - 1] = True
        if not mask.any():
            raise ConfigError("no allowed source types to sample from")
        probs = np.where(mask, probs, 0.0)
        probs = probs / probs.sum()
    total = int(lengths.sum())
    flat = rng.choice(spec.source_size, size=total, p=probs) + 1
    dictionary = spec.dictionary_array()
    flat_tgt = dictionary[flat]
    if spec.noise_rate > 0:
        noisy = rng.random(total) < spec.noise_rate
        flat_tgt[noisy] = rng.integers(1, spec.target_size + 1, size=int(noisy.sum()))
    bounds = np.cumsum(lengths)[:-1]
    pairs = list(zip(np.split(flat, bounds), np.split(flat_tgt, bounds)))
    alignments = [[(i, i) for i in range(int(n))] for n in lengths]
    return ParallelCorpus(pairs, alignments)


def gen_corpus(spec: VocabSpec, n_pairs: int, max_len: int, seed: int) -> ParallelCorpus:
    """Zipf-distributed monotone corpus; targets are dictionary images with noise."""
    if n_pairs < 1 or max_len < 1:
        raise ConfigError(f"n_pairs and max_len must be >= 1, got {n_pairs}, {max_len}")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, max_len + 1, size=n_pairs)
    return _sample_sentences(spec, lengths, rng)


def gen_sentences(
    spec: VocabSpec,
    count: int,
    length: int,
    seed: int,
    allowed_types: Sequence[int] | None = None,
) -> ParallelCorpus:
    """Fixed-length pairs, optionally restricted to a subset of source types."""
    if count < 1 or length < 1:
        raise ConfigError("count and length must be >= 1")
    rng = np.random.default_rng(seed)
    return _sample_sentences(spec, np.full(count, length), rng, allowed_types)


def dictionary_accuracy(corpus: ParallelCorpus, spec: VocabSpec) -> float:
    """Fraction of gold links whose target token is the dictionary image."""
    hits = total = 0
    for (src, tgt), links in zip(corpus.pairs, corpus.alignments):
        for i, j in links:
            total += 1
            hits += int(spec.dictionary[int(src[i])] == int(tgt[j]))
    return hits / total if total else 1.0


def write_corpus(path, corpus: ParallelCorpus) -> None:
    lines = []
    for (src, tgt), links in zip(corpus.pairs, corpus.alignments):
        lines.append(
            " ".join(map(str, src.tolist())) + "\t"
            + " ".join(map(str, tgt.tolist())) + "\t"
            + format_pharaoh(links)
        )
    atomic_write(path, "\n".join(lines) + "\n")


def read_corpus(path) -> ParallelCorpus:
    pairs, alignments = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise StoreFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            src = np.array([int(t) for t in fields[0].split()], dtype=np.int64)
            tgt = np.array([int(t) for t in fields[1].split()], dtype=np.int64)
        except ValueError as exc:
            raise StoreFormatError(f"{path}:{lineno}: non-integer token") from exc
        pairs.append((src, tgt))
        alignments.append(parse_pharaoh(fields[2]))
    try:
        return ParallelCorpus(pairs, alignments)
    except ConfigError as exc:
        raise StoreFormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class SynthEncoder:
    """Seeded stand-in for a trained encoder/decoder.

    Source position i encodes ``e(x_i) + mix_decay * e(x_{i-1})``. A translation
    context is the mean source encoding plus ``focus_weight`` times the encoding
    of the source position currently being translated (position ``len(prefix)``,
    clipped to the sentence) plus a decayed sum of the prefix's target
    embeddings. All outputs are L2-normalized.
    """

    dim: int = 64
    seed: int = 0
    mix_decay: float = 0.5
    focus_weight: float = 1.0
    _tables: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.mix_decay < 1.0:
            raise ConfigError(f"mix_decay must lie in [0, 1), got {self.mix_decay}")

    def _table(self, namespace: int, max_id: int) -> np.ndarray:
        table = self._tables.get(namespace)
        have = 0 if table is None else len(table)
        if have <= max_id:
            rows = []
            for type_id in range(have, max_id + 1):
                rng = np.random.default_rng([self.seed, namespace, type_id])
                v = rng.standard_normal(self.dim)
                rows.append(v / np.linalg.norm(v))
            new = np.array(rows)
            table = new if table is None else np.vstack([table, new])
            self._tables[namespace] = table
        return table

    def source_embeddings(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return self._table(_SOURCE_NS, int(ids.max(initial=0)))[ids]

    def target_embeddings(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return self._table(_TARGET_NS, int(ids.max(initial=0)))[ids]


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0, 1.0, norms)


def encode_source(enc: SynthEncoder, sentence) -> np.ndarray:
    """Per-token source representations, shape ``(n, dim)``."""
    sentence = np.asarray(sentence, dtype=np.int64)
    if sentence.size == 0:
        raise ConfigError("cannot encode an empty sentence")
    emb = enc.source_embeddings(sentence)
    out = emb.copy()
    out[1:] += enc.mix_decay * emb[:-1]
    return _normalize_rows(out)


def encode_contexts(enc: SynthEncoder, source, target) -> np.ndarray:
    """Contexts for every prefix ``target[:i]``, ``i = 0..len(target)``."""
    src = encode_source(enc, source)
    target = np.asarray(target, dtype=np.int64)
    steps = len(target) + 1
    base = src.mean(axis=0)
    focus = src[np.minimum(np.arange(steps), len(src) - 1)]
    prefix = np.zeros((steps, enc.dim))
    if len(target):
        temb = enc.target_embeddings(target)
        for i in range(1, steps):
            prefix[i] = enc.mix_decay * prefix[i - 1] + temb[i - 1]
    return _normalize_rows(base + enc.focus_weight * focus + prefix)


def encode_context(enc: SynthEncoder, source, target_prefix) -> np.ndarray:
    return encode_contexts(enc, source, target_prefix)[-1]


def output_embeddings(
    enc: SynthEncoder,
    dictionary: Mapping[int, int],
    target_size: int,
    scale: float = 4.0,
) -> np.ndarray:
    """Output layer of the base model, ``(target_size + 1, dim)``.

    Row t is the mean source embedding of t's dictionary preimages, so the base
    model favours translations of the source word in focus. Row 0 (EOS) and
    rows without a preimage are zero.
    """
    out = np.zeros((target_size + 1, enc.dim))
    counts = np.zeros(target_size + 1)
    src_ids = np.array(sorted(dictionary), dtype=np.int64)
    if len(src_ids):
        for s, row in zip(src_ids, enc.source_embeddings(src_ids)):
            t = dictionary[int(s)]
            out[t] += row
            counts[t] += 1
    out[counts > 0] /= counts[counts > 0, None]
    return scale * out


def infer_dictionary(corpus: ParallelCorpus) -> dict[int, int]:
    """Most frequent aligned target per source type (ties to the lower id)."""
    counts: dict[int, Counter] = {}
    for (src, tgt), links in zip(corpus.pairs, corpus.alignments):
        for i, j in links:
            counts.setdefault(int(src[i]), Counter())[int(tgt[j])] += 1
    return {s: min(c, key=lambda t: (-c[t], t)) for s, c in counts.items()}


def base_prob(h: np.ndarray, output_emb: np.ndarray) -> np.ndarray:
    """Softmax over dot products between ``h`` and every output embedding."""
    logits = output_emb @ np.asarray(h, dtype=np.float64)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()
