import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xalign.bitext import (SRC2TGT, TGT2SRC, AlignedWordPair, AlignmentSet, SentencePair, align_corpus,
                           drop_trivial, emit_pharaoh, filter_corpus, filter_one_to_one, ibm1_train,
                           parse_bitext, parse_pharaoh, read_aligned_pairs, symmetrize_gdfa, viterbi_align,
                           write_aligned_pairs)
from xalign.errors import EmptyCorpusError, ParseError, RangeError, ShapeError
from xalign.oracles import gdfa_bruteforce, ibm1_dense


def A(links, m, n):
    return AlignmentSet(frozenset(links), m, n)


def sp(src, tgt, pid=0):
    return SentencePair(tuple(src.split()), tuple(tgt.split()), pid)


# ---------------------------------------------------------------- parsing


def test_parse_basic_and_ids():
    res = parse_bitext(["a b ||| x y", "", "c ||| z"])
    assert [p.pair_id for p in res.pairs] == [0, 2]
    assert res.pairs[0].src == ("a", "b") and res.pairs[0].tgt == ("x", "y")
    assert res.skipped == 1 and not res.errors


@pytest.mark.parametrize("line, outcome", [
    ("a b x y", "error"),
    ("x y ||| a ||| b", "error"),
    ("||| a", "skip"),
    ("a |||", "skip"),
    ("a|||b", "error"),
    ("  a\tb  |||  c  ", "ok"),
])
def test_parse_edge_cases(line, outcome):
    res = parse_bitext([line])
    got = "ok" if res.pairs else ("error" if res.errors else "skip")
    assert got == outcome


def test_pharaoh_roundtrip():
    a = parse_pharaoh("1-0 0-1  0-0", 2, 2)
    assert a.links == {(0, 0), (0, 1), (1, 0)}
    assert emit_pharaoh(a) == "0-0 0-1 1-0"
    assert emit_pharaoh(parse_pharaoh("", 3, 3)) == ""


@pytest.mark.parametrize("line", ["0-3", "a-1", "0:1", "1-2-3", "-1-0"])
def test_pharaoh_errors(line):
    with pytest.raises(ParseError):
        parse_pharaoh(line, 2, 3)


def test_alignment_set_range_check():
    with pytest.raises(RangeError):
        A({(2, 0)}, 2, 2)


# ---------------------------------------------------------------- IBM1


def test_ibm1_one_iteration_hand_values():
    # E-step from uniform 1/2: "a b|x y" gives a,b each 1/2 of x and y; "a|x" gives a all of x.
    pairs = [sp("a b", "x y"), sp("a", "x", 1)]
    t = ibm1_train(pairs, iterations=1)
    assert t.prob("x", "a") == pytest.approx(0.75, abs=1e-15)
    assert t.prob("y", "a") == pytest.approx(0.25, abs=1e-15)
    assert t.prob("x", "b") == pytest.approx(0.5, abs=1e-15)
    assert t.prob("y", "b") == pytest.approx(0.5, abs=1e-15)
    assert t.prob("x", "zzz") == 1e-9


def test_ibm1_matches_dense_oracle(rng):
    words_s, words_t = list("abcdefg"), list("pqrstuv")
    pairs = []
    for k in range(30):
        n = int(rng.integers(1, 5))
        pairs.append(SentencePair(tuple(rng.choice(words_s, n)), tuple(rng.choice(words_t, int(rng.integers(1, 5)))), k))
    t = ibm1_train(pairs, iterations=4)
    sv, tv, table = ibm1_dense([p.src for p in pairs], [p.tgt for p in pairs], 4)
    for a, s in enumerate(sv):
        for b, w in enumerate(tv):
            if table[b, a] > 0:
                assert t.prob(w, s) == pytest.approx(table[b, a], rel=1e-10)


def test_ibm1_reverse_direction():
    pairs = [sp("a b", "x y"), sp("a", "x", 1)]
    rev = ibm1_train(pairs, iterations=1, reverse=True)
    # p(src | tgt): x co-occurs with a twice and b once
    assert rev.prob("a", "x") == pytest.approx(0.75)


def test_ibm1_log_likelihood_non_decreasing(rng):
    pairs = [SentencePair(tuple(rng.choice(list("abcde"), 3)), tuple(rng.choice(list("vwxyz"), 3)), k)
             for k in range(20)]
    hist = []
    ibm1_train(pairs, iterations=8, history=hist)
    assert len(hist) == 9
    assert all(b >= a - 1e-9 for a, b in zip(hist, hist[1:]))


@pytest.mark.parametrize("pairs, iters, exc", [([], 1, EmptyCorpusError), ([SentencePair(("a",), ("b",))], 0, RangeError)])
def test_ibm1_errors(pairs, iters, exc):
    with pytest.raises(exc):
        ibm1_train(pairs, iters)


def test_viterbi_ties_to_lowest_index():
    pair = sp("a", "x y")
    t = ibm1_train([pair], 1)
    assert viterbi_align(pair, t, SRC2TGT).links == {(0, 0)}
    assert viterbi_align(pair, t, TGT2SRC).links == {(0, 0), (0, 1)}


def test_viterbi_bad_direction():
    pair = sp("a", "x")
    with pytest.raises(ValueError):
        viterbi_align(pair, ibm1_train([pair]), "sideways")


# ---------------------------------------------------------------- GDFA


def test_gdfa_identical_inputs():
    f = A({(0, 0), (1, 2)}, 3, 3)
    assert symmetrize_gdfa(f, f) == f


def test_gdfa_grow_example():
    # (1,1) is diagonal to (0,0); once added, (1,2) neighbours it and covers unaligned target 2.
    out = symmetrize_gdfa(A({(0, 0), (1, 1)}, 2, 3), A({(0, 0), (1, 2)}, 2, 3))
    assert out.links == {(0, 0), (1, 1), (1, 2)}


def test_gdfa_final_and_adds_isolated_links():
    out = symmetrize_gdfa(A({(0, 0), (2, 2)}, 3, 3), A({(0, 0)}, 3, 3))
    assert out.links == {(0, 0), (2, 2)}


def test_gdfa_final_and_needs_both_unaligned():
    # (1,0): target 0 already aligned, no neighbour requirement in the final step -> rejected
    out = symmetrize_gdfa(A({(0, 0), (2, 0)}, 3, 1), A({(0, 0)}, 3, 1))
    assert out.links == {(0, 0)}


def test_gdfa_empty():
    assert symmetrize_gdfa(A(set(), 2, 2), A(set(), 2, 2)).links == frozenset()


def test_gdfa_is_not_direction_symmetric():
    # Swapping directions (and transposing) can change the result: grow and
    # final-and are both order dependent. Pinned counterexample.
    f, b = A({(0, 1), (1, 0)}, 2, 2), A({(0, 0)}, 2, 2)
    ab = symmetrize_gdfa(f, b).links
    ba = symmetrize_gdfa(b, f).links
    assert ab == gdfa_bruteforce(f.links, b.links, 2, 2)
    assert ba == gdfa_bruteforce(b.links, f.links, 2, 2)
    assert ab != ba


links_strategy = st.integers(1, 6).flatmap(lambda m: st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.just(m), st.just(n),
    st.frozensets(st.tuples(st.integers(0, m - 1), st.integers(0, n - 1))),
    st.frozensets(st.tuples(st.integers(0, m - 1), st.integers(0, n - 1))))))


@settings(max_examples=300)
@given(links_strategy)
def test_gdfa_matches_bruteforce(case):
    m, n, F, B = case
    got = symmetrize_gdfa(A(F, m, n), A(B, m, n)).links
    assert got == gdfa_bruteforce(F, B, m, n)
    assert F & B <= got <= F | B


# ---------------------------------------------------------------- filters


def test_one_to_one_example():
    out = filter_one_to_one(A({(0, 0), (0, 1), (1, 2), (2, 2), (3, 3)}, 4, 4))
    assert out.links == {(3, 3)}


@settings(max_examples=300)
@given(links_strategy)
def test_one_to_one_is_partial_matching_and_idempotent(case):
    m, n, F, _ = case
    out = filter_one_to_one(A(F, m, n))
    src = [i for i, _ in out.links]
    tgt = [j for _, j in out.links]
    assert len(set(src)) == len(src) and len(set(tgt)) == len(tgt)
    assert out.links <= F
    assert filter_one_to_one(out) == out


def test_drop_trivial_is_byte_exact():
    composed, decomposed = "caf\u00e9", "cafe\u0301"
    pair = SentencePair(("Paris", "the", "2020", composed), ("Paris", "le", "2020", decomposed))
    out = drop_trivial(A({(0, 0), (1, 1), (2, 2), (3, 3)}, 4, 4), pair)
    # same rendering, different bytes: the accented pair survives
    assert out.links == {(1, 1), (3, 3)}


def test_drop_trivial_case_sensitive():
    assert drop_trivial(A({(0, 0)}, 1, 1), sp("Berlin", "berlin")).links == {(0, 0)}


def test_drop_trivial_shape_mismatch():
    with pytest.raises(ShapeError):
        drop_trivial(A({(0, 0)}, 1, 2), sp("a", "b"))


# ---------------------------------------------------------------- pipeline


def _toy_corpus():
    lines = ["the cat sat ||| le chat assis", "the dog ||| le chien", "a cat ||| un chat", "Paris ||| Paris"]
    return parse_bitext(lines).pairs


def test_align_corpus_fixture():
    aligned, stats = align_corpus(_toy_corpus(), iterations=5)
    got = {(a.pair_id, a.src_word, a.tgt_word) for a in aligned}
    assert got == {(0, "the", "le"), (0, "cat", "chat"), (0, "sat", "assis"), (1, "the", "le"),
                   (1, "dog", "chien"), (2, "a", "un"), (2, "cat", "chat")}
    assert stats.pairs_in == 4 and stats.trivial_dropped == 1 and stats.links_kept == 7


def test_filter_corpus_workers_preserve_order():
    pairs = _toy_corpus() * 3
    fwd = [A({(0, 0)}, len(p.src), len(p.tgt)) for p in pairs]
    serial, s1 = filter_corpus(pairs, fwd, fwd, workers=1)
    parallel, s2 = filter_corpus(pairs, fwd, fwd, workers=2)
    assert serial == parallel and s1 == s2


def test_filter_corpus_length_mismatch():
    with pytest.raises(ShapeError):
        filter_corpus(_toy_corpus(), [], [])


def test_aligned_pairs_roundtrip(tmp_path):
    pairs = [AlignedWordPair(3, 0, 1, "chat", "cat"), AlignedWordPair(4, 2, 0, "x", "y")]
    write_aligned_pairs(tmp_path / "a.tsv", pairs)
    assert read_aligned_pairs(tmp_path / "a.tsv") == pairs


def test_aligned_pairs_bad_file(tmp_path):
    (tmp_path / "a.tsv").write_text("1\t2\tx\n")
    with pytest.raises(ParseError):
        read_aligned_pairs(tmp_path / "a.tsv")
