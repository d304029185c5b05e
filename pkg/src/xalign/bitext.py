"""Parallel-corpus parsing, lexical EM alignment, symmetrization and link filters.

Alignment links are always stored source-first: ``(src_idx, tgt_idx)``, 0-based.
"""
from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyCorpusError, ParseError, RangeError, ShapeError

SEPARATOR = "|||"
PROB_FLOOR = 1e-9
SRC2TGT = "src2tgt"
TGT2SRC = "tgt2src"

NEIGHBORS = ((-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True)
class SentencePair:
    src: tuple[str, ...]
    tgt: tuple[str, ...]
    pair_id: int = 0
    lang: str = "tgt"


@dataclass(frozen=True)
class AlignmentSet:
    links: frozenset
    src_len: int
    tgt_len: int

    def __post_init__(self):
        object.__setattr__(self, "links", frozenset((int(i), int(j)) for i, j in self.links))
        for i, j in self.links:
            if not (0 <= i < self.src_len and 0 <= j < self.tgt_len):
                raise RangeError(f"link {i}-{j} outside {self.src_len}x{self.tgt_len}")

    def sorted(self) -> list[tuple[int, int]]:
        return sorted(self.links)

    def transpose(self) -> "AlignmentSet":
        return AlignmentSet(frozenset((j, i) for i, j in self.links), self.tgt_len, self.src_len)

    def __len__(self) -> int:
        return len(self.links)

    def __contains__(self, link) -> bool:
        return tuple(link) in self.links


@dataclass(frozen=True)
class AlignedWordPair:
    pair_id: int
    src_idx: int
    tgt_idx: int
    src_word: str
    tgt_word: str
    lang: str = "tgt"


@dataclass
class ParseResult:
    pairs: list[SentencePair]
    skipped: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)


# ---------------------------------------------------------------- parsing


def parse_bitext(lines: Iterable[str], lang: str = "tgt") -> ParseResult:
    """Parse ``src ||| tgt`` lines.

    Tokens are whitespace-separated. A line with no separator, or with more than
    one ``|||`` token, is a parse error (recorded, not raised). Lines with an
    empty side are skipped and counted. ``pair_id`` is the 0-based line number.
    """
    res = ParseResult([])
    for lineno, line in enumerate(lines):
        toks = line.split()
        if not toks:
            res.skipped += 1
            continue
        seps = [k for k, t in enumerate(toks) if t == SEPARATOR]
        if not seps:
            res.errors.append((lineno, "missing ' ||| ' separator"))
            continue
        if len(seps) > 1:
            res.errors.append((lineno, "more than one ' ||| ' separator"))
            continue
        src, tgt = toks[:seps[0]], toks[seps[0] + 1:]
        if not src or not tgt:
            res.skipped += 1
            continue
        res.pairs.append(SentencePair(tuple(src), tuple(tgt), lineno, lang))
    return res


def parse_pharaoh(line: str, src_len: int, tgt_len: int) -> AlignmentSet:
    links = set()
    for tok in line.split():
        parts = tok.split("-")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ParseError(f"malformed alignment token {tok!r}")
        i, j = int(parts[0]), int(parts[1])
        if i >= src_len or j >= tgt_len:
            raise ParseError(f"link {tok} outside {src_len}x{tgt_len} sentence pair")
        links.add((i, j))
    return AlignmentSet(frozenset(links), src_len, tgt_len)


def emit_pharaoh(aset: AlignmentSet) -> str:
    return " ".join(f"{i}-{j}" for i, j in aset.sorted())


# ---------------------------------------------------------------- lexical EM


class TranslationTable:
    """Sparse conditional table ``p(word | given)``."""

    def __init__(self, probs: dict[str, dict[str, float]]):
        self.probs = probs

    def prob(self, word: str, given: str) -> float:
        return max(self.probs.get(given, {}).get(word, 0.0), PROB_FLOOR)

    def __getitem__(self, given: str) -> dict[str, float]:
        return self.probs[given]

    def __contains__(self, given: str) -> bool:
        return given in self.probs


def _corpus_log_likelihood(sides, t) -> float:
    ll = 0.0
    for given, gen in sides:
        inv = 1.0 / len(given)
        for w in gen:
            ll += math.log(inv * sum(t[g][w] for g in given))
    return ll


def ibm1_train(pairs: Sequence[SentencePair], iterations: int = 5, reverse: bool = False,
               history: list | None = None) -> TranslationTable:
    """EM for a lexical translation model ``p(tgt | src)`` (``p(src | tgt)`` if reversed).

    Initialization is uniform; no NULL word is used, so every distribution is
    over co-occurring words only. Expected counts are accumulated in corpus
    order, which makes the result deterministic. If ``history`` is a list, the
    corpus log-likelihood before each M-step is appended to it.
    """
    if iterations < 1:
        raise RangeError("iterations must be >= 1")
    if not pairs:
        raise EmptyCorpusError("cannot train on an empty corpus")
    sides = [(p.tgt, p.src) if reverse else (p.src, p.tgt) for p in pairs]
    gen_vocab = {w for _, gen in sides for w in gen}
    uniform = 1.0 / len(gen_vocab)
    t: dict[str, dict[str, float]] = defaultdict(dict)
    for given, gen in sides:
        for g in given:
            row = t[g]
            for w in gen:
                row[w] = uniform
    for _ in range(iterations):
        counts: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        ll = 0.0
        for given, gen in sides:
            for w in gen:
                z = sum(t[g][w] for g in given)
                ll += math.log(z / len(given))
                for g in given:
                    counts[g][w] += t[g][w] / z
        if history is not None:
            history.append(ll)
        t = defaultdict(dict)
        for g, row in counts.items():
            total = math.fsum(row.values())
            t[g] = {w: c / total for w, c in row.items()}
    if history is not None:
        history.append(_corpus_log_likelihood(sides, t))
    return TranslationTable(dict(t))


def viterbi_align(pair: SentencePair, table: TranslationTable, direction: str = SRC2TGT) -> AlignmentSet:
    """Link every word of the conditioning side to its most probable counterpart.

    ``src2tgt``: each source word i picks ``argmax_j p(t_j | s_i)``.
    ``tgt2src``: each target word j picks ``argmax_i p(s_i | t_j)``.
    Ties go to the lowest index; unseen words fall back to a 1e-9 floor.
    """
    links = set()
    if direction == SRC2TGT:
        for i, s in enumerate(pair.src):
            scores = [table.prob(t, s) for t in pair.tgt]
            links.add((i, scores.index(max(scores))))
    elif direction == TGT2SRC:
        for j, t in enumerate(pair.tgt):
            scores = [table.prob(s, t) for s in pair.src]
            links.add((scores.index(max(scores)), j))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return AlignmentSet(frozenset(links), len(pair.src), len(pair.tgt))


# ---------------------------------------------------------------- symmetrization


def symmetrize_gdfa(forward: AlignmentSet, backward: AlignmentSet) -> AlignmentSet:
    """grow-diag-final-and.

    Starts from the intersection. Grow: scan union links in (src, tgt) order
    and add any link that has an 8-neighbour already in the alignment and
    touches an unaligned source or target word; repeat until a pass adds
    nothing. Final-and: scan the forward links, then the backward links, each
    in (src, tgt) order, adding those whose both words are still unaligned.
    """
    if (forward.src_len, forward.tgt_len) != (backward.src_len, backward.tgt_len):
        raise ShapeError("forward and backward alignments cover different sentence shapes")
    union = forward.links | backward.links
    cur = set(forward.links & backward.links)
    src_al = {i for i, _ in cur}
    tgt_al = {j for _, j in cur}
    candidates = sorted(union - cur)
    changed = True
    while changed:
        changed = False
        for i, j in candidates:
            if (i, j) in cur or (i in src_al and j in tgt_al):
                continue
            if any((i + di, j + dj) in cur for di, dj in NEIGHBORS):
                cur.add((i, j))
                src_al.add(i)
                tgt_al.add(j)
                changed = True
    for links in (forward.links, backward.links):
        for i, j in sorted(links):
            if i not in src_al and j not in tgt_al:
                cur.add((i, j))
                src_al.add(i)
                tgt_al.add(j)
    return AlignmentSet(frozenset(cur), forward.src_len, forward.tgt_len)


# ---------------------------------------------------------------- filters


def filter_one_to_one(aset: AlignmentSet) -> AlignmentSet:
    src_deg: dict[int, int] = defaultdict(int)
    tgt_deg: dict[int, int] = defaultdict(int)
    for i, j in aset.links:
        src_deg[i] += 1
        tgt_deg[j] += 1
    kept = frozenset((i, j) for i, j in aset.links if src_deg[i] == 1 and tgt_deg[j] == 1)
    return AlignmentSet(kept, aset.src_len, aset.tgt_len)


def drop_trivial(aset: AlignmentSet, pair: SentencePair) -> AlignmentSet:
    """Remove links whose source and target words are byte-identical (no case folding)."""
    if (aset.src_len, aset.tgt_len) != (len(pair.src), len(pair.tgt)):
        raise ShapeError("alignment does not match sentence pair lengths")
    kept = frozenset((i, j) for i, j in aset.links
                     if pair.src[i].encode("utf-8") != pair.tgt[j].encode("utf-8"))
    return AlignmentSet(kept, aset.src_len, aset.tgt_len)


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineStats:
    pairs_in: int = 0
    links_symmetrized: int = 0
    links_one_to_one: int = 0
    trivial_dropped: int = 0
    links_kept: int = 0


def _process_pair(args) -> tuple[AlignmentSet, AlignmentSet, AlignmentSet]:
    pair, fwd, bwd = args
    sym = symmetrize_gdfa(fwd, bwd)
    o2o = filter_one_to_one(sym)
    return sym, o2o, drop_trivial(o2o, pair)


def filter_corpus(pairs: Sequence[SentencePair], forward: Sequence[AlignmentSet],
                  backward: Sequence[AlignmentSet], workers: int = 1
                  ) -> tuple[list[AlignedWordPair], PipelineStats]:
    """Symmetrize, keep one-to-one links, then drop trivial links, for every pair.

    Per-sentence work may be spread over ``workers`` processes; output order
    always follows the input order.
    """
    if not (len(pairs) == len(forward) == len(backward)):
        raise ShapeError("pairs, forward and backward alignments differ in length")
    jobs = list(zip(pairs, forward, backward))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_process_pair, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_process_pair(j) for j in jobs]
    stats = PipelineStats(pairs_in=len(pairs))
    out = []
    for pair, (sym, o2o, kept) in zip(pairs, results):
        stats.links_symmetrized += len(sym)
        stats.links_one_to_one += len(o2o)
        stats.trivial_dropped += len(o2o) - len(kept)
        for i, j in kept.sorted():
            out.append(AlignedWordPair(pair.pair_id, i, j, pair.src[i], pair.tgt[j], pair.lang))
    stats.links_kept = len(out)
    return out, stats


def align_corpus(pairs: Sequence[SentencePair], iterations: int = 5, workers: int = 1
                 ) -> tuple[list[AlignedWordPair], PipelineStats]:
    """Full pipeline: EM in both directions, Viterbi links, then :func:`filter_corpus`."""
    fwd_table = ibm1_train(pairs, iterations)
    bwd_table = ibm1_train(pairs, iterations, reverse=True)
    fwd = [viterbi_align(p, fwd_table, SRC2TGT) for p in pairs]
    bwd = [viterbi_align(p, bwd_table, TGT2SRC) for p in pairs]
    return filter_corpus(pairs, fwd, bwd, workers)


ALIGNED_HEADER = ("pair_id", "src_idx", "tgt_idx", "src_word", "tgt_word")


def write_aligned_pairs(path, pairs: Iterable[AlignedWordPair]) -> None:
    """Tab-separated: pair_id, src_idx, tgt_idx, src_word, tgt_word (no header)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{p.pair_id}\t{p.src_idx}\t{p.tgt_idx}\t{p.src_word}\t{p.tgt_word}\n")


def read_aligned_pairs(path, lang: str = "tgt") -> list[AlignedWordPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(f"line {lineno}: expected 5 tab-separated columns, got {len(cols)}")
            try:
                out.append(AlignedWordPair(int(cols[0]), int(cols[1]), int(cols[2]), cols[3], cols[4], lang))
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer index column") from None
    return out
