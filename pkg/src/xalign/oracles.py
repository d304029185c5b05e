"""Deliberately naive reference implementations used to cross-check fast paths.

Nothing here is used by training or the pipeline; the self-test and the test
suite compare the production code against these.
"""
from __future__ import annotations

import numpy as np


def gdfa_bruteforce(fwd_links, bwd_links, src_len: int, tgt_len: int) -> set[tuple[int, int]]:
    """grow-diag-final-and on dense boolean grids, one cell at a time."""
    F = np.zeros((src_len, tgt_len), dtype=bool)
    Bk = np.zeros((src_len, tgt_len), dtype=bool)
    for i, j in fwd_links:
        F[i, j] = True
    for i, j in bwd_links:
        Bk[i, j] = True
    U = F | Bk
    A = F & Bk

    def src_aligned(i):
        return bool(A[i, :].any())

    def tgt_aligned(j):
        return bool(A[:, j].any())

    def has_neighbor(i, j):
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ii, jj = i + di, j + dj
                if 0 <= ii < src_len and 0 <= jj < tgt_len and A[ii, jj]:
                    return True
        return False

    while True:
        added = False
        for i in range(src_len):
            for j in range(tgt_len):
                if U[i, j] and not A[i, j]:
                    if (not src_aligned(i) or not tgt_aligned(j)) and has_neighbor(i, j):
                        A[i, j] = True
                        added = True
        if not added:
            break

    for grid in (F, Bk):
        for i in range(src_len):
            for j in range(tgt_len):
                if grid[i, j] and not src_aligned(i) and not tgt_aligned(j):
                    A[i, j] = True

    return {(int(i), int(j)) for i, j in zip(*np.nonzero(A))}


def ibm1_dense(src_sents, tgt_sents, iterations: int):
    """Dense-matrix lexical EM; returns (src vocab, tgt vocab, table[t, s] = p(t|s))."""
    sv = sorted({w for s in src_sents for w in s})
    tv = sorted({w for t in tgt_sents for w in t})
    si = {w: k for k, w in enumerate(sv)}
    ti = {w: k for k, w in enumerate(tv)}
    table = np.full((len(tv), len(sv)), 1.0 / len(tv))
    for _ in range(iterations):
        counts = np.zeros_like(table)
        for s, t in zip(src_sents, tgt_sents):
            cols = [si[w] for w in s]
            for w in t:
                row = table[ti[w], cols]
                post = row / row.sum()
                for c, p in zip(cols, post):
                    counts[ti[w], c] += p
        table = counts / counts.sum(axis=0, keepdims=True)
    return sv, tv, table
