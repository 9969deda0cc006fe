"""Command-line entry point: ``fasterknn <subcommand> [flags]``.

Subcommands: gen, build, cluster, translate, bench, ablate. Every flag may
also come from a ``--config`` file of ``key=value`` lines; flags given on the
command line win over the file, which wins over built-in defaults.

Exit codes: 0 ok, 2 usage error or missing file, 3 malformed input file,
4 bench threshold violated.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import bench as benchmod
from .alignment import read_alignments
from .binfmt import atomic_write
from .clusterstore import build_type_clusters, load_clusters, save_clusters
from .datastore import (
    AlignmentMap,
    build_faster_cluster_store,
    build_fast_source,
    encode_training_sources,
    load_store,
    map_tokens_to_target,
    precompute_target_clusters,
    save_store,
)
from .decode import STRATEGIES, DecodeConfig, build_resources, token_accuracy, translate
from .errors import ConfigError, StoreFormatError, UsageError
from .quantize import pq_train
from .synth import ParallelCorpus, SynthEncoder, VocabSpec, gen_corpus, read_corpus, write_corpus

logger = logging.getLogger("fasterknn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_THRESHOLD = 4


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _str_list(text: str) -> list[str]:
    return [v for v in text.replace(" ", "").split(",") if v]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64, help="context vector dimension")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _corpus_args(p, test: bool = True) -> None:
    p.add_argument("--corpus", required=True, help="training corpus (src<TAB>tgt<TAB>links)")
    p.add_argument("--align", help="pharaoh file overriding the corpus alignment column")
    if test:
        p.add_argument("--test", required=True, help="test corpus, same format")


def _store_args(p) -> None:
    p.add_argument("--c", type=int, default=16, help="neighbours kept per source token (fast)")
    p.add_argument("--m", type=int, default=64, help="target occurrences per k-means cluster")
    p.add_argument("--freq-threshold", type=int, default=benchmod.BenchConfig.freq_threshold,
                   help="per-type frequency at which source search switches to IVF")
    p.add_argument("--nlist", type=int, help="IVF cells for the vanilla store (exact search when unset)")
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--pq", type=_bool, nargs="?", const=True, default=False,
                   help="product-quantize the vanilla store (memory mode)")
    p.add_argument("--pq-m", type=int, default=8, help="PQ sub-quantizers")
    p.add_argument("--pq-ksub", type=int, default=256, help="PQ codewords per sub-quantizer")
    p.add_argument("--clusters", help="prebuilt cluster file (skips k-means)")


def _decode_args(p) -> None:
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int, help="output length cap (default: source length)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fasterknn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic parallel corpus")
    _common(p)
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--test-pairs", type=int, default=200)
    p.add_argument("--max-len", type=int, default=19)
    p.add_argument("--vocab", type=int, default=200, help="source vocabulary size")
    p.add_argument("--target-vocab", type=int, help="target vocabulary size (default: --vocab)")
    p.add_argument("--noise", type=float, default=0.0, help="probability of a random target token")
    p.add_argument("--zipf", type=float, default=1.0, help="Zipf exponent of type frequencies")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build", help="build and save a datastore binary")
    _common(p)
    _corpus_args(p, test=False)
    p.add_argument("--test", help="test corpus; required for the per-sentence fast/faster stores")
    p.add_argument("--strategy", choices=("vanilla", "fast", "faster"), default="vanilla")
    _store_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="run per-type k-means and save the cluster map")
    _common(p)
    _corpus_args(p, test=False)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("translate", help="decode a test set and score token accuracy")
    _common(p)
    _corpus_args(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="faster")
    _decode_args(p)
    _store_args(p)
    p.add_argument("--store", help="prebuilt datastore binary matching --strategy")
    p.add_argument("--out", required=True, help="hypotheses file")
    p.add_argument("--report", help="JSON accuracy report (printed to stdout either way)")

    p = sub.add_parser("bench", help="time and count the strategies over a c sweep")
    _common(p)
    p.add_argument("--sizes", type=_int_list, default=[100_000], help="datastore sizes to sweep")
    p.add_argument("--c", type=_int_list, default=[8, 64, 512], help="c values to sweep")
    p.add_argument("--n", type=_int_list, default=[10], help="source lengths to sweep")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--freq-threshold", type=int, default=benchmod.BenchConfig.freq_threshold)
    p.add_argument("--strategy", type=_str_list, default=list(STRATEGIES), help="comma-separated")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--sentences", type=int, default=20)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--max-len", type=int, default=19)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--check", type=_bool, nargs="?", const=True, default=True,
                   help="exit 4 when a counter identity or the speed ordering fails")

    p = sub.add_parser("ablate", help="accuracy and speed of all five strategies side by side")
    _common(p)
    _corpus_args(p)
    _decode_args(p)
    _store_args(p)
    p.add_argument("--format", choices=("csv", "json"), help="also write the table in this format")
    p.add_argument("--out", help="table output path (with --format)")
    return parser


# -- config file -----------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, keys use - or _."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise StoreFormatError(f"{path}:{lineno}: expected key=value")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def _apply_config(sub: argparse.ArgumentParser, config: dict[str, str]) -> None:
    by_dest = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    aliases = {"lambda": "lam"}
    defaults = {}
    for key, raw in config.items():
        dest = aliases.get(key, key)
        action = by_dest.get(dest)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for this command")
        convert = action.type or (int if isinstance(action, argparse._CountAction) else str)
        try:
            value = convert(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    config_path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif tok.startswith("--config="):
            config_path = tok.split("=", 1)[1]
    if config_path is not None and argv and not argv[0].startswith("-"):
        _apply_config(_subparser(parser, argv[0]), read_config(config_path))
    return parser.parse_args(argv)


# -- shared helpers --------------------------------------------------------------


def _load_corpus(path, align_path=None) -> ParallelCorpus:
    corpus = read_corpus(path)
    if align_path:
        links = read_alignments(align_path)
        if len(links) != len(corpus):
            raise StoreFormatError(f"{align_path}: {len(links)} lines for {len(corpus)} sentence pairs")
        corpus = ParallelCorpus(corpus.pairs, links)
    return corpus


def _encoder(args) -> SynthEncoder:
    return SynthEncoder(args.dim, seed=args.seed)


def _resources(args, corpus, strategies):
    """Build decode resources, reusing a cluster file when one is given."""
    enc = _encoder(args)
    cluster_based = {"faster", "faster_no_cache", "fast_with_faster_source"}
    want = set(strategies)
    prebuilt = None
    if getattr(args, "clusters", None) and want & cluster_based:
        prebuilt = load_clusters(args.clusters)
        if prebuilt.dim != args.dim:
            raise ConfigError(f"cluster file has d={prebuilt.dim}, expected --dim {args.dim}")
        want -= cluster_based
        want.add("vanilla")
    res = build_resources(
        corpus, enc, strategies=sorted(want), c=args.c, m=args.m, freq_threshold=args.freq_threshold,
        nprobe=args.nprobe, seed=args.seed, threads=args.threads,
    )
    if prebuilt is not None:
        res.alignment = res.alignment or AlignmentMap.from_corpus(corpus)
        res.clusters = prebuilt
        res.target_cache = precompute_target_clusters(prebuilt, res.alignment, res.vanilla)
    if args.nlist:
        res.vanilla.use_ivf(args.nlist, nprobe=min(args.nprobe, args.nlist), seed=args.seed)
    if args.pq:
        res.vanilla.use_pq(pq_train(res.vanilla.keys, args.pq_m, args.pq_ksub, seed=args.seed))
    return res


def _decode_config(args, strategy: str) -> DecodeConfig:
    return DecodeConfig(
        k=args.k, temperature=args.temp, lam=args.lam, strategy=strategy, max_len=args.max_len, beam=args.beam
    )


def _format_sentences(sentences) -> str:
    return "".join(" ".join(map(str, s)) + "\n" for s in sentences)


def _run_strategy(test: ParallelCorpus, cfg: DecodeConfig, res, stores=None) -> dict:
    hyps, ops, steps = [], 0, 0
    t0 = time.perf_counter()
    for i, src in enumerate(test.sources):
        hyp, traces = translate(src, cfg, res, store=None if stores is None else stores[i])
        hyps.append(hyp)
        ops += sum(t.dist_ops for t in traces)
        steps += len(traces)
    elapsed = time.perf_counter() - t0
    return {
        "strategy": cfg.strategy,
        "k": cfg.k,
        "lambda": cfg.lam,
        "temperature": cfg.temperature,
        "sentences": len(test),
        "token_accuracy": token_accuracy(hyps, test.targets),
        "ms_per_sentence": 1000.0 * elapsed / max(1, len(test)),
        "dist_ops_per_step": ops / max(1, steps),
        "hypotheses": hyps,
    }


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = VocabSpec.random(args.vocab, args.target_vocab, seed=args.seed, noise_rate=args.noise,
                            zipf_exponent=args.zipf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, n_pairs, seed in (("train", args.pairs, args.seed + 1), ("test", args.test_pairs, args.seed + 2)):
        corpus = gen_corpus(spec, n_pairs, args.max_len, seed=seed)
        write_corpus(out / f"{name}.tsv", corpus)
        atomic_write(out / f"{name}.align", "".join(
            " ".join(f"{i}-{j}" for i, j in links) + "\n" for links in corpus.alignments
        ))
        logger.info("wrote %s: %d pairs, %d target tokens", name, len(corpus), corpus.num_target_tokens())
    return EXIT_OK


def cmd_build(args) -> int:
    corpus = _load_corpus(args.corpus, args.align)
    if args.strategy == "vanilla":
        res = _resources(args, corpus, ["vanilla"])
        save_store(args.out, res.vanilla)
        logger.info("vanilla store: %d entries", len(res.vanilla))
        return EXIT_OK
    if not args.test:
        raise UsageError(f"--test is required to build per-sentence {args.strategy} stores")
    test = _load_corpus(args.test)
    res = _resources(args, corpus, [args.strategy])
    if args.strategy == "fast":
        stores = [
            map_tokens_to_target(build_fast_source(s, res.encoder, res.type_indices, res.c), res.alignment,
                                 res.vanilla)
            for s in test.sources
        ]
    else:
        stores = [
            build_faster_cluster_store(s, res.encoder, res.clusters, res.alignment, res.vanilla, res.target_cache)
            for s in test.sources
        ]
    save_store(args.out, stores)
    logger.info("%s stores for %d sentences", args.strategy, len(stores))
    return EXIT_OK


def cmd_cluster(args) -> int:
    corpus = _load_corpus(args.corpus, args.align)
    table = encode_training_sources(corpus, _encoder(args))
    cmap = build_type_clusters(table.group_by_type(), args.m, args.seed, threads=args.threads)
    save_clusters(args.out, cmap)
    logger.info("%d clusters over %d types", cmap.total_clusters(), len(cmap.types()))
    return EXIT_OK


def _prebuilt_stores(args, test):
    if not args.store:
        return None
    flavor = {"vanilla": "vanilla", "fast": "fast", "fast_with_faster_source": "fast"}.get(args.strategy, "faster")
    stores = load_store(args.store, flavor)
    if flavor == "vanilla":
        return [stores] * len(test)
    if len(stores) != len(test):
        raise UsageError(f"{args.store} holds {len(stores)} sentence stores, test set has {len(test)}")
    return stores


def cmd_translate(args) -> int:
    corpus = _load_corpus(args.corpus, args.align)
    test = _load_corpus(args.test)
    res = _resources(args, corpus, [args.strategy])
    stores = _prebuilt_stores(args, test)
    result = _run_strategy(test, _decode_config(args, args.strategy), res, stores)
    atomic_write(args.out, _format_sentences(result.pop("hypotheses")))
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.report:
        atomic_write(args.report, text + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = benchmod.BenchConfig(
        store_sizes=args.sizes, c_values=args.c, k=args.k, d=args.dim, n_values=args.n,
        repetitions=args.repetitions, warmup=args.warmup, seed=args.seed, sentences=args.sentences,
        strategies=args.strategy, vocab_size=args.vocab, max_len=args.max_len, m=args.m,
        freq_threshold=args.freq_threshold, lam=args.lam, temperature=args.temp,
    )
    report = benchmod.run_bench(cfg)
    benchmod.emit_report(report, args.format, args.out)
    for note in report.notes:
        print(f"note: {note}")
    problems = benchmod.check_report(report)
    for problem in problems:
        print(f"violation: {problem}", file=sys.stderr)
    return EXIT_THRESHOLD if args.check and problems else EXIT_OK


ABLATE_COLUMNS = ("strategy", "token_accuracy", "ms_per_sentence", "dist_ops_per_step")


def cmd_ablate(args) -> int:
    corpus = _load_corpus(args.corpus, args.align)
    test = _load_corpus(args.test)
    res = _resources(args, corpus, STRATEGIES)
    rows = []
    for strategy in STRATEGIES:
        row = _run_strategy(test, _decode_config(args, strategy), res)
        row.pop("hypotheses")
        rows.append(row)
    print(f"{'strategy':<26}{'accuracy':>10}{'ms/sent':>10}{'ops/step':>12}")
    for r in rows:
        print(f"{r['strategy']:<26}{r['token_accuracy']:>10.2f}{r['ms_per_sentence']:>10.2f}"
              f"{r['dist_ops_per_step']:>12.1f}")
    if args.format:
        if not args.out:
            raise UsageError("--format needs --out")
        if args.format == "json":
            text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
        else:
            text = ",".join(ABLATE_COLUMNS) + "\n" + "".join(
                ",".join(str(r[c]) for c in ABLATE_COLUMNS) + "\n" for r in rows
            )
        atomic_write(args.out, text)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "build": cmd_build,
    "cluster": cmd_cluster,
    "translate": cmd_translate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except StoreFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
