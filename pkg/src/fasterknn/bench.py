"""Timing and space harness comparing the decoding strategies.

Distance-operation counters are deterministic for a fixed seed; wall-clock
fields are not. Timed runs are single-threaded and serialized.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .binfmt import atomic_write
from .decode import STRATEGIES, DecodeConfig, KnnResources, build_resources, prepare_store, translate
from .errors import ConfigError
from .synth import SynthEncoder, VocabSpec, gen_corpus, gen_sentences

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("strategy", "n", "c", "k", "d", "store_bytes", "dist_ops", "ns_mean", "ns_p95")

# strategies whose per-sentence store does not depend on c
_C_FREE = ("vanilla",)


@dataclass
class BenchConfig:
    store_sizes: list[int] = field(default_factory=lambda: [100_000])
    c_values: list[int] = field(default_factory=lambda: [8, 64, 512])
    k: int = 16
    d: int = 64
    n_values: list[int] = field(default_factory=lambda: [10])
    repetitions: int = 5
    warmup: int = 2
    seed: int = 0
    sentences: int = 20
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    vocab_size: int = 200
    max_len: int = 19
    m: int = 64
    freq_threshold: int = 2_000
    min_type_freq: int | None = None  # None: max(c_values)
    lam: float = 0.5
    temperature: float = 1.0

    def __post_init__(self) -> None:
        counts = [self.k, self.d, self.repetitions, self.sentences, self.vocab_size, self.max_len, self.m]
        lists = [self.store_sizes, self.c_values, self.n_values]
        if any(v < 1 for v in counts) or any(not xs or min(xs) < 1 for xs in lists):
            raise ConfigError("all bench counts must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.repetitions < 3:
            raise ConfigError("at least 3 repetitions are required behind every mean")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ConfigError(f"unknown strategies {sorted(unknown)}")


@dataclass
class BenchRow:
    strategy: str
    store_size: int
    n: int
    c: int
    k: int
    d: int
    store_bytes: int
    dist_ops: float  # mean per decoding step
    build_dist_ops: float  # mean per sentence, store construction
    ns_mean: float  # per decoding step
    ns_median: float
    ns_p95: float
    search_ns_median: float  # retrieval only, per step
    sentence_ns_median: float  # store construction + full decode
    sentence_ns_mean: float
    counter_mismatches: int  # steps whose counter differs from the closed form
    steps: int
    repetitions: int


@dataclass
class BenchReport:
    config: dict
    rows: list[BenchRow]
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        raw = json.loads(text)
        return cls(raw["config"], [BenchRow(**r) for r in raw["rows"]], raw.get("notes", []))

    def select(self, **match) -> list[BenchRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def _available_bytes() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _fit_store_size(size: int, d: int, notes: list[str]) -> int:
    """Halve the requested store until its estimated footprint fits in half of free memory."""
    avail = _available_bytes()
    if avail is None:
        return size
    estimate = lambda s: s * d * 4 * 6  # keys, index copies, source table, clusters
    fitted = size
    while fitted > 1000 and estimate(fitted) > avail // 2:
        fitted //= 2
    if fitted != size:
        notes.append(f"store size {size} reduced to {fitted} to fit available memory")
        logger.warning(notes[-1])
    return fitted


def _resident_bytes(strategy: str, store) -> int:
    if strategy == "vanilla":
        return int(store.keys.nbytes + store.values.nbytes)
    if strategy == "faster":
        return store.resident_bytes(with_vectors=False)
    if strategy == "faster_no_cache":
        return store.resident_bytes(with_vectors=True)
    return store.resident_bytes()


def _expected_ops(strategy: str, store) -> int | None:
    if strategy == "faster":
        return store.n
    if strategy in ("fast", "fast_with_faster_source"):
        return len(store)
    if strategy == "vanilla" and store.index.__class__.__name__ == "BruteIndex":
        return len(store)
    return None


def _build_dist_ops(strategy: str, store) -> int:
    return 0 if strategy == "vanilla" else int(getattr(store, "dist_ops", 0))


def measure(
    res: KnnResources,
    sources,
    strategy: str,
    cfg: BenchConfig,
    n: int,
    c: int,
    store_size: int,
) -> BenchRow:
    """Warm up, then time ``repetitions`` passes over ``sources``."""
    dcfg = DecodeConfig(k=cfg.k, temperature=cfg.temperature, lam=cfg.lam, strategy=strategy, max_len=n)
    res.c = c
    # counters and sizes are deterministic, collect them once
    nbytes, build_ops, mismatches = [], [], 0
    for src in sources:
        store = prepare_store(src, strategy, res)
        nbytes.append(_resident_bytes(strategy, store))
        build_ops.append(_build_dist_ops(strategy, store))
        expected = _expected_ops(strategy, store)
        _, traces = translate(src, dcfg, res, store=store)
        if expected is not None:
            mismatches += sum(1 for t in traces if t.dist_ops != expected)
    for _ in range(cfg.warmup):
        for src in sources:
            translate(src, dcfg, res)
    step_ns, search_ns, sent_ns, ops = [], [], [], []
    for _ in range(cfg.repetitions):
        for src in sources:
            t0 = time.perf_counter_ns()
            _, traces = translate(src, dcfg, res)
            sent_ns.append(time.perf_counter_ns() - t0)
            step_ns.extend(t.elapsed_ns for t in traces)
            search_ns.extend(t.search_ns for t in traces)
            ops.extend(t.dist_ops for t in traces)
    step = np.asarray(step_ns, dtype=np.float64)
    return BenchRow(
        strategy=strategy,
        store_size=store_size,
        n=n,
        c=0 if strategy in _C_FREE else c,
        k=cfg.k,
        d=cfg.d,
        store_bytes=int(np.mean(nbytes)),
        dist_ops=float(np.mean(ops)),
        build_dist_ops=float(np.mean(build_ops)),
        ns_mean=float(step.mean()),
        ns_median=float(np.median(step)),
        ns_p95=float(np.percentile(step, 95)),
        search_ns_median=float(np.median(search_ns)),
        sentence_ns_median=float(np.median(sent_ns)),
        sentence_ns_mean=float(np.mean(sent_ns)),
        counter_mismatches=mismatches,
        steps=len(step),
        repetitions=cfg.repetitions,
    )


def workload(cfg: BenchConfig, store_size: int):
    """Training corpus of about ``store_size`` target tokens plus its resources."""
    spec = VocabSpec.random(cfg.vocab_size, seed=cfg.seed)
    n_pairs = max(1, round(store_size / ((cfg.max_len + 1) / 2)))
    corpus = gen_corpus(spec, n_pairs, cfg.max_len, seed=cfg.seed + 1)
    encoder = SynthEncoder(cfg.d, seed=cfg.seed + 2)
    res = build_resources(
        corpus,
        encoder,
        dictionary=spec.dictionary,
        target_size=spec.target_size,
        strategies=cfg.strategies,
        c=max(cfg.c_values),
        m=cfg.m,
        freq_threshold=cfg.freq_threshold,
        seed=cfg.seed,
    )
    return spec, corpus, res


def bench_sources(cfg: BenchConfig, spec: VocabSpec, corpus, n: int, notes: list[str]):
    """Fixed-length test sentences drawn from types frequent enough for every c."""
    min_freq = max(cfg.c_values) if cfg.min_type_freq is None else cfg.min_type_freq
    freq = np.bincount(np.concatenate(corpus.sources), minlength=spec.source_size + 1)
    allowed = [t for t in range(1, spec.source_size + 1) if freq[t] >= min_freq]
    if not allowed:
        notes.append(f"no source type reaches frequency {min_freq}; sampling from all types")
        allowed = None
    return gen_sentences(spec, cfg.sentences, n, seed=cfg.seed + 3 + n, allowed_types=allowed).sources


def run_bench(cfg: BenchConfig) -> BenchReport:
    notes: list[str] = []
    rows: list[BenchRow] = []
    for requested in cfg.store_sizes:
        size = _fit_store_size(requested, cfg.d, notes)
        spec, corpus, res = workload(cfg, size)
        actual = corpus.num_target_tokens()
        for n in cfg.n_values:
            sources = bench_sources(cfg, spec, corpus, n, notes)
            for strategy in cfg.strategies:
                c_sweep = cfg.c_values[:1] if strategy in _C_FREE else cfg.c_values
                for c in c_sweep:
                    rows.append(measure(res, sources, strategy, cfg, n, c, actual))
                    logger.info("measured %s n=%d c=%d", strategy, n, c)
    return BenchReport(asdict(cfg), rows, notes)


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow([getattr(r, col) for col in CSV_COLUMNS])
    return buf.getvalue()


def emit_report(report: BenchReport, fmt: str, path) -> None:
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report.to_json()
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    atomic_write(path, text)


def check_report(report: BenchReport, linear_tol: float = 0.10) -> list[str]:
    """Violations of the counter identities and the speed ordering."""
    problems = []
    for r in report.rows:
        if r.counter_mismatches:
            problems.append(f"{r.strategy} n={r.n} c={r.c}: {r.counter_mismatches} steps off the closed-form count")
        if r.strategy == "faster" and r.dist_ops != r.n:
            problems.append(f"faster n={r.n} c={r.c}: {r.dist_ops} distance ops per step, expected {r.n}")
    for size in sorted({r.store_size for r in report.rows}):
        for n in sorted({r.n for r in report.rows}):
            faster = {r.c: r for r in report.select(strategy="faster", store_size=size, n=n)}
            fast = {r.c: r for r in report.select(strategy="fast", store_size=size, n=n)}
            if len({r.dist_ops for r in faster.values()}) > 1:
                problems.append(f"faster distance ops vary with c at n={n}")
            cs = sorted(fast)
            for lo, hi in zip(cs, cs[1:]):
                measured = fast[hi].dist_ops / fast[lo].dist_ops
                if abs(measured / (hi / lo) - 1.0) > linear_tol:
                    problems.append(f"fast ops ratio c={hi}/c={lo} is {measured:.3f}, expected {hi / lo:.3f}")
            vanilla = report.select(strategy="vanilla", store_size=size, n=n)
            for c in cs:
                if c not in faster:
                    continue
                v = vanilla[0].sentence_ns_median if vanilla else float("inf")
                if not v > fast[c].sentence_ns_median > faster[c].sentence_ns_median:
                    problems.append(f"speed ordering vanilla > fast > faster fails at n={n} c={c}")
    return problems
