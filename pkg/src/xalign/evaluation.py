"""Synthetic bilingual data, word-translation retrieval and the multi-seed harness.

The synthetic task plants a known rotation between languages: each source
word's first-unit embedding ``x`` has a translation whose first-unit embedding
is ``Q x + noise``. Retrieval P@1 then measures how well a given alignment
method undoes ``Q``.
"""
from __future__ import annotations

import io
import logging
import math
import statistics
import string
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .bitext import AlignedWordPair, SentencePair, align_corpus
from .encoder import Vocab, encode_batch, encoder_dims, init_encoder, split_units
from .errors import ConfigError, ParseError, UndefinedMetricError
from .numerics import random_orthogonal
from .objectives import MappingMatrix, SimilarityHead, procrustes_svd
from .trainer import FINETUNE_MODES, OBJECTIVES, RunConfig, static_features, train_finetune, train_linear_mapping

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (13, 42, 87, 100, 2020)
TASKS = ("lex-seen", "lex-heldout")
METRIC = "p@1"
# Markdown rows follow this order; unknown objectives go after, alphabetically.
OBJECTIVE_ORDER = OBJECTIVES
PREFIX_LEN = 3


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticBilingualSpec:
    n_words: int = 500
    dim: int = 32
    sigma: float = 0.01
    n_sentences: int = 2000
    min_len: int = 5
    max_len: int = 10
    seed: int = 0
    languages: tuple[str, ...] = ("xx",)
    heldout_fraction: float = 0.1
    emb_sigma: float = 0.1
    layers: int = 2
    reorder: float = 2.5       # target order = argsort(i + U(0, reorder))

    def __post_init__(self):
        if self.sigma < 0 or self.emb_sigma <= 0:
            raise ConfigError("need sigma >= 0 and emb_sigma > 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        n_train = self.n_words - round(self.n_words * self.heldout_fraction)
        if n_train < self.max_len:
            raise ConfigError("too few training words for the requested sentence length")
        if self.n_words * (1 + len(self.languages)) > 26 ** PREFIX_LEN:
            raise ConfigError("n_words too large for unique three-letter prefixes")
        if not self.languages or len(set(self.languages)) != len(self.languages):
            raise ConfigError("languages must be non-empty and distinct")


@dataclass
class SyntheticCorpus:
    spec: SyntheticBilingualSpec
    src_words: list[str]
    tgt_words: dict[str, list[str]]
    rotations: dict[str, np.ndarray]
    src_emb: np.ndarray
    tgt_emb: dict[str, np.ndarray]
    heldout: np.ndarray              # sorted word indices never used in the bitext
    pairs: list[SentencePair]
    gold: list[AlignedWordPair]
    vocab: Vocab
    params: object                   # ParamVector with the planted embeddings

    @property
    def seen(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.spec.n_words), self.heldout)


def _make_words(rng: np.random.Generator, count: int) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    codes = rng.choice(26 ** PREFIX_LEN, count, replace=False)
    words = []
    for c in codes:
        prefix = "".join(letters[[(c // 26 ** k) % 26 for k in (2, 1, 0)]])
        tail = "".join(rng.choice(letters, int(rng.integers(0, 7))))
        words.append(prefix + tail)
    return words


def gen_synthetic(spec: SyntheticBilingualSpec) -> SyntheticCorpus:
    """Seeded synthetic bitext over a planted rotation per target language.

    Words carry unique three-letter prefixes, so a word longer than six
    characters splits into units whose first unit is that prefix and no two
    words share a first unit. Source first-unit embeddings are Gaussian;
    target first-unit embeddings are the rotated source embeddings plus
    Gaussian noise. Target sentences are the word-by-word translation under a
    local reordering, with the gold links recorded.
    """
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_words, spec.dim
    all_words = _make_words(rng, n * (1 + len(spec.languages)))
    src_words = all_words[:n]
    tgt_words = {l: all_words[n * (k + 1):n * (k + 2)] for k, l in enumerate(spec.languages)}
    X = rng.normal(0.0, spec.emb_sigma, (n, d))
    rotations, tgt_emb = {}, {}
    for l in spec.languages:
        Q = random_orthogonal(d, rng)
        noise = rng.normal(0.0, 1.0, (n, d))
        rotations[l] = Q
        tgt_emb[l] = X @ Q.T + spec.sigma * noise
    heldout = np.sort(rng.choice(n, round(n * spec.heldout_fraction), replace=False))
    train_words = np.setdiff1d(np.arange(n), heldout)

    pairs, gold = [], []
    for s in range(spec.n_sentences):
        lang = spec.languages[s % len(spec.languages)]
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        idx = rng.choice(train_words, length, replace=False)
        perm = np.argsort(np.arange(length) + rng.uniform(0.0, spec.reorder, length), kind="stable")
        src = tuple(src_words[i] for i in idx)
        tgt = tuple(tgt_words[lang][idx[p]] for p in perm)
        pairs.append(SentencePair(src, tgt, s, lang))
        where = np.empty(length, dtype=np.int64)
        where[perm] = np.arange(length)
        for i in range(length):
            gold.append(AlignedWordPair(s, i, int(where[i]), src[i], tgt[where[i]], lang))

    lexicon = src_words + [w for l in spec.languages for w in tgt_words[l]]
    vocab = Vocab(u for w in lexicon for u in split_units(w))
    params = init_encoder(len(vocab), d, spec.layers, seed=spec.seed + 1)
    emb = np.array(params["emb"])
    emb[[vocab.id(split_units(w)[0]) for w in src_words]] = X
    for l in spec.languages:
        emb[[vocab.id(split_units(w)[0]) for w in tgt_words[l]]] = tgt_emb[l]
    params = params.replace(emb=emb)
    return SyntheticCorpus(spec, src_words, tgt_words, rotations, X, tgt_emb, heldout,
                           pairs, gold, vocab, params)


# ---------------------------------------------------------------- retrieval


def retrieval_p_at_1(src_states, tgt_states, gold: Sequence[tuple[int, int]],
                     mapping: MappingMatrix | np.ndarray | None = None) -> float:
    """Fraction of gold ``(i, j)`` whose source row ``i`` has target ``j`` as its cosine argmax.

    With a mapping, target rows are mapped first (``T @ W``). Ties go to the
    lowest target index.
    """
    if len(gold) == 0:
        raise UndefinedMetricError("P@1 is undefined for an empty gold set")
    S = np.atleast_2d(np.asarray(src_states, dtype=np.float64))
    T = np.atleast_2d(np.asarray(tgt_states, dtype=np.float64))
    if mapping is not None:
        T = mapping.apply(T) if isinstance(mapping, MappingMatrix) else T @ np.asarray(mapping)
    g = np.asarray(gold, dtype=np.int64).reshape(-1, 2)
    if g.min() < 0 or g[:, 0].max() >= S.shape[0] or g[:, 1].max() >= T.shape[0]:
        raise UndefinedMetricError("gold index out of range")
    Sn = S / np.maximum(np.linalg.norm(S, axis=1, keepdims=True), 1e-12)
    Tn = T / np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-12)
    sims = Sn[g[:, 0]] @ Tn.T
    return float(np.mean(np.argmax(sims, axis=1) == g[:, 1]))


def word_states(params, vocab: Vocab, words: Sequence[str], layer: int = -1) -> np.ndarray:
    """Type-level state per word: its first unit, encoding the word as a one-word sentence."""
    ids = [vocab.ids(split_units(w)) for w in words]
    if layer == 0:
        return np.array(params["emb"])[[i[0] for i in ids]]
    cache = encode_batch(params, ids)
    return cache.outputs[layer][cache.starts]


# ---------------------------------------------------------------- harness


@dataclass(frozen=True)
class HarnessConfig:
    synthetic: SyntheticBilingualSpec = SyntheticBilingualSpec()
    run: RunConfig = RunConfig()
    objectives: tuple[str, ...] = ("none", "procrustes", "weak", "strong")
    use_gold_alignments: bool = False

    def __post_init__(self):
        bad = [o for o in self.objectives if o not in OBJECTIVES]
        if bad:
            raise ConfigError(f"unknown objective(s) {bad}; valid: {', '.join(OBJECTIVES)}")


@dataclass(frozen=True)
class RunResult:
    task: str
    objective: str
    seed: int
    metric: str
    value: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _score(corpus: SyntheticCorpus, src_states, tgt_states: dict, mapping: dict | None,
           objective: str, seed: int, prefix: str = "") -> list[RunResult]:
    out = []
    for task, rows in (("lex-seen", corpus.seen), ("lex-heldout", corpus.heldout)):
        if rows.size == 0:
            continue
        vals = []
        for lang in corpus.spec.languages:
            m = None if mapping is None else mapping[lang]
            vals.append(retrieval_p_at_1(src_states, tgt_states[lang], [(i, i) for i in rows], m))
        out.append(RunResult(prefix + task, objective, seed, METRIC, float(np.mean(vals))))
    return out


def _head_states(head: SimilarityHead | None, X: np.ndarray) -> np.ndarray:
    return X if head is None else head.forward(X)


def run_objective(corpus: SyntheticCorpus, aligned: Sequence[AlignedWordPair], objective: str,
                  run: RunConfig, seed: int) -> list[RunResult]:
    """Train (if needed) and score one objective on one synthetic corpus."""
    langs = corpus.spec.languages
    params, vocab = corpus.params, corpus.vocab
    cfg = replace(run, seed=seed, mode=objective)
    if objective == "none":
        S = word_states(params, vocab, corpus.src_words)
        T = {l: word_states(params, vocab, corpus.tgt_words[l]) for l in langs}
        return _score(corpus, S, T, None, objective, seed)
    if objective in ("procrustes", "linear"):
        feats = static_features(params, corpus.pairs, aligned, vocab, cfg.max_seq_len, layers=[0])
        if objective == "procrustes":
            maps = {l: procrustes_svd(*feats[l][0], lang=l, layer=0) for l in langs}
        else:
            res = train_linear_mapping(feats, cfg)
            maps = {l: res.mappings[(l, 0)] for l in langs}
        S = word_states(params, vocab, corpus.src_words, layer=0)
        T = {l: word_states(params, vocab, corpus.tgt_words[l], layer=0) for l in langs}
        return _score(corpus, S, T, maps, objective, seed)
    if objective in FINETUNE_MODES:
        res = train_finetune(params, corpus.pairs, aligned, vocab, cfg)
        S = word_states(res.params, vocab, corpus.src_words)
        T = {l: word_states(res.params, vocab, corpus.tgt_words[l]) for l in langs}
        out = _score(corpus, _head_states(res.head, S),
                     {l: _head_states(res.head, t) for l, t in T.items()}, None, objective, seed)
        if res.head is not None:
            out += _score(corpus, S, T, None, objective, seed, prefix="nohead:")
        return out
    raise ConfigError(f"unknown objective {objective!r}")


def run_seed(config: HarnessConfig, seed: int) -> list[RunResult]:
    """All objectives for one seed; a failing objective yields failed records, not an exception."""
    corpus = gen_synthetic(replace(config.synthetic, seed=seed))
    if config.use_gold_alignments:
        aligned = corpus.gold
    else:
        aligned, _ = align_corpus(corpus.pairs, config.run.ibm1_iterations)
    out = []
    for obj in config.objectives:
        t0 = time.perf_counter()
        try:
            out += run_objective(corpus, aligned, obj, config.run, seed)
        except Exception as exc:  # recorded, reported by summarize
            log.warning("seed %s objective %s failed: %s", seed, obj, exc)
            out += [RunResult(t, obj, seed, METRIC, math.nan, f"failed:{type(exc).__name__}") for t in TASKS]
        log.info("seed %s objective %s done in %.1fs", seed, obj, time.perf_counter() - t0)
    return out


def multi_seed_run(config: HarnessConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                   workers: int = 1) -> list[RunResult]:
    """Run every objective under every seed with identical hyperparameters.

    Seeds run in separate processes when ``workers > 1``; results come back in
    seed order either way.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("multi_seed_run needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds")
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as ex:
            chunks = list(ex.map(run_seed, [config] * len(seeds), seeds))
    else:
        chunks = [run_seed(config, s) for s in seeds]
    return [r for c in chunks for r in c]


# ---------------------------------------------------------------- summaries / reports


@dataclass(frozen=True)
class SummaryStats:
    task: str
    objective: str
    n: int
    mean: float
    std: float
    values: tuple[tuple[int, float], ...] = field(default=())
    flag: str = ""


def _objective_key(name: str):
    base = name
    return (OBJECTIVE_ORDER.index(base), "") if base in OBJECTIVE_ORDER else (len(OBJECTIVE_ORDER), name)


def summarize(results: Iterable[RunResult]) -> list[SummaryStats]:
    """Mean and sample (n-1) standard deviation per (task, objective).

    Failed runs are left out with a warning. A group with one value gets
    std 0 and the flag ``single-seed``. Output is sorted by task, then by
    objective, so it does not depend on input order.
    """
    groups: dict[tuple[str, str], dict[int, float]] = {}
    failed = []
    for r in results:
        if not r.ok or not math.isfinite(r.value):
            failed.append(r)
            continue
        g = groups.setdefault((r.task, r.objective), {})
        if r.seed in g:
            raise ConfigError(f"duplicate result for {(r.task, r.objective, r.seed)}")
        g[r.seed] = r.value
    if failed:
        warnings.warn(f"{len(failed)} failed run(s) excluded from the summary: "
                      + ", ".join(sorted({f'{r.objective}/seed={r.seed}' for r in failed})), stacklevel=2)
    out = []
    for (task, obj), by_seed in groups.items():
        vals = [by_seed[s] for s in sorted(by_seed)]
        n = len(vals)
        mean = statistics.fmean(vals)
        std = statistics.stdev(vals) if n > 1 else 0.0
        out.append(SummaryStats(task, obj, n, mean, std, tuple((s, by_seed[s]) for s in sorted(by_seed)),
                                "" if n > 1 else "single-seed"))
    out.sort(key=lambda s: (s.task, _objective_key(s.objective)))
    return out


TSV_COLUMNS = ("task", "objective", "n", "mean", "std", "flag", "seeds")


def format_cell(mean: float, std: float, scale: float = 1.0, decimals: int = 1) -> str:
    """``"mean ± std"`` rounded half-to-even to ``decimals`` after scaling."""
    return f"{mean * scale:.{decimals}f} ± {std * scale:.{decimals}f}"


def emit_report(summaries: Sequence[SummaryStats], fmt: str = "tsv", scale: float = 1.0,
                decimals: int = 1) -> str:
    """Render summaries as TSV (full precision) or a markdown table.

    TSV: one row per summary with columns ``task objective n mean std flag``
    followed by one ``seed=value`` column per seed. Markdown: objectives as
    rows, tasks as columns, cells ``mean ± std`` (single-seed cells get a
    trailing ``*``).
    """
    if not summaries:
        raise ConfigError("nothing to report")
    buf = io.StringIO()
    if fmt == "tsv":
        buf.write("\t".join(TSV_COLUMNS) + "\n")
        for s in summaries:
            seeds = [f"{seed}={v!r}" for seed, v in s.values]
            buf.write("\t".join([s.task, s.objective, str(s.n), repr(s.mean), repr(s.std), s.flag] + seeds) + "\n")
        return buf.getvalue()
    if fmt != "markdown":
        raise ConfigError(f"unknown report format {fmt!r}; use tsv or markdown")
    tasks = sorted({s.task for s in summaries})
    objs = sorted({s.objective for s in summaries}, key=_objective_key)
    cell = {(s.objective, s.task): s for s in summaries}
    buf.write("| objective | " + " | ".join(tasks) + " |\n")
    buf.write("|---|" + "---|" * len(tasks) + "\n")
    for o in objs:
        row = []
        for t in tasks:
            s = cell.get((o, t))
            if s is None:
                row.append("")
            else:
                row.append(format_cell(s.mean, s.std, scale, decimals) + (" *" if s.flag else ""))
        buf.write(f"| {o} | " + " | ".join(row) + " |\n")
    if any(s.flag for s in summaries):
        buf.write("\n\\* single seed, std reported as 0\n")
    return buf.getvalue()


def parse_tsv_report(text: str) -> list[SummaryStats]:
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != TSV_COLUMNS:
        raise ParseError("report header does not match the documented TSV schema")
    out = []
    for k, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) < 6:
            raise ParseError(f"line {k}: expected at least 6 columns")
        try:
            vals = tuple((int(c.split("=", 1)[0]), float(c.split("=", 1)[1])) for c in cols[6:])
            out.append(SummaryStats(cols[0], cols[1], int(cols[2]), float(cols[3]), float(cols[4]),
                                    vals, cols[5]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"line {k}: {exc}") from None
    return out


RESULT_COLUMNS = ("task", "objective", "seed", "metric", "value", "status")


def dumps_results(results: Iterable[RunResult]) -> str:
    return "".join(f"{r.task}\t{r.objective}\t{r.seed}\t{r.metric}\t{r.value!r}\t{r.status}\n" for r in results)


def loads_results(text: str) -> list[RunResult]:
    out = []
    for k, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(RESULT_COLUMNS):
            raise ParseError(f"line {k}: expected {len(RESULT_COLUMNS)} tab-separated fields")
        try:
            out.append(RunResult(cols[0], cols[1], int(cols[2]), cols[3], float(cols[4]), cols[5]))
        except ValueError as exc:
            raise ParseError(f"line {k}: {exc}") from None
    return out


def pooled_std(a: SummaryStats, b: SummaryStats) -> float:
    return math.sqrt((a.std ** 2 + b.std ** 2) / 2.0)
