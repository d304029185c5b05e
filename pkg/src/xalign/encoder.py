"""A small deterministic contextual encoder used as a stand-in for a pretrained model.

Forward rule for a sentence of ``n`` units with ids ``x``::

    H_0     = E[x]                                   (embedding lookup)
    U_k     = H_k + rho * P[:n] + gamma * mean_rows(H_k)
    H_{k+1} = tanh(U_k @ M_k + b_k)                  k = 0 .. L-1

``P`` is the standard sinusoidal position table, ``rho = POSITION_SCALE`` and
``gamma = CONTEXT_WEIGHT``. The sentence-mean term makes every state depend on
the other units of its sentence. Parameters live in a :class:`ParamVector` with
segments ``emb``, ``layer{k}.mix`` and ``layer{k}.bias``.
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import container
from .errors import ShapeError, SpanError, VocabError
from .numerics import ParamVector

POSITION_SCALE = 0.1
CONTEXT_WEIGHT = 0.5
MAX_WORD_CHARS = 6
UNIT_CHARS = 3
UNK = "<unk>"
UNK_ID = 0


# ---------------------------------------------------------------- units / vocab


def split_units(word: str) -> list[str]:
    """Break words longer than six characters into three-character units."""
    if len(word) <= MAX_WORD_CHARS:
        return [word]
    return [word[i:i + UNIT_CHARS] for i in range(0, len(word), UNIT_CHARS)]


def words_to_units(words: Sequence[str]) -> tuple[list[str], list[range]]:
    """Split a word sequence into units; returns the units and one span per word."""
    units: list[str] = []
    spans: list[range] = []
    for w in words:
        parts = split_units(w)
        spans.append(range(len(units), len(units) + len(parts)))
        units.extend(parts)
    return units, spans


class Vocab:
    """Bijection between unit strings and ids; id 0 is reserved for unknown units."""

    def __init__(self, units: Iterable[str]):
        known = sorted(set(units) - {UNK})
        self.units = [UNK] + known
        self._index = {u: i for i, u in enumerate(self.units)}

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        return cls(u for words in sentences for w in words for u in split_units(w))

    def __len__(self) -> int:
        return len(self.units)

    def __contains__(self, unit: str) -> bool:
        return unit in self._index

    def id(self, unit: str) -> int:
        return self._index.get(unit, UNK_ID)

    def ids(self, units: Iterable[str]) -> list[int]:
        return [self._index.get(u, UNK_ID) for u in units]

    def unit(self, idx: int) -> str:
        if not 0 <= idx < len(self.units):
            raise VocabError(f"id {idx} outside vocabulary of size {len(self.units)}")
        return self.units[idx]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u in self.units:
                fh.write(u + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            units = [line.rstrip("\n") for line in fh]
        return cls(units)


# ---------------------------------------------------------------- parameters


def init_encoder(vocab_size: int, dim: int = 16, layers: int = 2, seed: int = 0,
                 sigma: float = 0.1) -> ParamVector:
    """Seeded Gaussian initialization standing in for pretraining."""
    rng = np.random.default_rng(seed)
    segs = {"emb": rng.normal(0.0, sigma, (vocab_size, dim))}
    for k in range(layers):
        segs[f"layer{k}.mix"] = rng.normal(0.0, sigma, (dim, dim))
        segs[f"layer{k}.bias"] = rng.normal(0.0, sigma, dim)
    return ParamVector(segs)


def encoder_dims(params: ParamVector) -> tuple[int, int, int]:
    """Return (vocab size, hidden size, layer count) and validate shapes."""
    if "emb" not in params:
        raise ShapeError("encoder params need an 'emb' segment")
    V, d = params["emb"].shape
    L = 0
    while f"layer{L}.mix" in params:
        if params[f"layer{L}.mix"].shape != (d, d) or params[f"layer{L}.bias"].shape != (d,):
            raise ShapeError(f"layer {L} shapes inconsistent with hidden size {d}")
        L += 1
    return V, d, L


@functools.lru_cache(maxsize=64)
def position_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)[:, : dim // 2]
    table.setflags(write=False)
    return table


# ---------------------------------------------------------------- forward


@dataclass(frozen=True)
class ContextualStates:
    """Per-layer states; ``layers[0]`` is the embedding layer, ``layers[-1]`` the final one."""

    layers: tuple[np.ndarray, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.layers[k]


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise VocabError(f"token id {int(bad)} outside vocabulary of size {vocab_size}")


def encode(params: ParamVector, token_ids: Sequence[int]) -> ContextualStates:
    V, d, L = encoder_dims(params)
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    _check_ids(ids, V)
    n = ids.size
    h = params["emb"][ids]
    layers = [h]
    if n == 0:
        return ContextualStates(tuple(np.zeros((0, d)) for _ in range(L + 1)))
    pos = POSITION_SCALE * position_table(n, d)
    for k in range(L):
        u = h + pos + CONTEXT_WEIGHT * h.mean(axis=0)
        h = np.tanh(u @ params[f"layer{k}.mix"] + params[f"layer{k}.bias"])
        layers.append(h)
    return ContextualStates(tuple(layers))


@dataclass
class BatchCache:
    ids: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray
    seg: np.ndarray
    inputs: list          # U_k per layer
    outputs: list         # H_k per layer, outputs[0] = embeddings

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1]


def encode_batch(params: ParamVector, sentences: Sequence[Sequence[int]]) -> BatchCache:
    """Encode many non-empty sentences at once, keeping what backprop needs.

    Rows of the returned states are the sentences' units concatenated in order;
    ``cache.starts[i]`` is the first row of sentence ``i``.
    """
    V, d, L = encoder_dims(params)
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    if lengths.size == 0 or lengths.min() == 0:
        raise ShapeError("encode_batch needs at least one sentence and no empty sentences")
    ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in sentences])
    _check_ids(ids, V)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    seg = np.repeat(np.arange(lengths.size), lengths)
    pos_idx = np.arange(ids.size) - starts[seg]
    pos = POSITION_SCALE * position_table(int(lengths.max()), d)[pos_idx]
    h = params["emb"][ids]
    outputs, inputs = [h], []
    for k in range(L):
        mean = np.add.reduceat(h, starts, axis=0) / lengths[:, None]
        u = h + pos + CONTEXT_WEIGHT * mean[seg]
        h = np.tanh(u @ params[f"layer{k}.mix"] + params[f"layer{k}.bias"])
        inputs.append(u)
        outputs.append(h)
    return BatchCache(ids, starts, lengths, seg, inputs, outputs)


def encode_batch_backward(params: ParamVector, cache: BatchCache,
                          grad_final: np.ndarray) -> ParamVector:
    """Gradient of a scalar w.r.t. encoder params given its gradient w.r.t. final states."""
    V, d, L = encoder_dims(params)
    grads = {}
    dh = grad_final
    for k in reversed(range(L)):
        h_out = cache.outputs[k + 1]
        dz = dh * (1.0 - h_out * h_out)
        grads[f"layer{k}.mix"] = cache.inputs[k].T @ dz
        grads[f"layer{k}.bias"] = dz.sum(axis=0)
        du = dz @ params[f"layer{k}.mix"].T
        dmean = np.add.reduceat(du, cache.starts, axis=0) / cache.lengths[:, None]
        dh = du + CONTEXT_WEIGHT * dmean[cache.seg]
    demb = np.zeros((V, d))
    np.add.at(demb, cache.ids, dh)
    grads["emb"] = demb
    return ParamVector(grads)


def first_unit_select(states: ContextualStates | np.ndarray, word_to_units: Sequence[Sequence[int]],
                      layer: int = -1) -> np.ndarray:
    """One row per word: the state of the word's first unit at ``layer``."""
    mat = states[layer] if isinstance(states, ContextualStates) else np.asarray(states)
    n = mat.shape[0]
    seen: set[int] = set()
    rows = []
    for w, span in enumerate(word_to_units):
        idx = list(span)
        if not idx:
            raise SpanError(f"word {w} has an empty unit span")
        for u in idx:
            if not 0 <= u < n:
                raise SpanError(f"word {w}: unit {u} outside sentence of {n} units")
            if u in seen:
                raise SpanError(f"word {w}: unit {u} already belongs to another word")
            seen.add(u)
        rows.append(idx[0])
    return mat[np.asarray(rows, dtype=np.int64)] if rows else np.zeros((0, mat.shape[1]))


# ---------------------------------------------------------------- snapshots / IO


@dataclass(frozen=True)
class PretrainedSnapshot:
    """Frozen copy of encoder parameters taken before alignment training."""

    params: ParamVector

    def restore(self) -> ParamVector:
        return self.params.map(np.copy)


def snapshot(params: ParamVector) -> PretrainedSnapshot:
    if not params.is_finite():
        raise ShapeError("cannot snapshot non-finite parameters")
    return PretrainedSnapshot(params.map(np.copy))


def save_encoder(path: str | os.PathLike, params: ParamVector, extra: dict | None = None) -> None:
    arrays = {f"encoder/{k}": v for k, v in params.items()}
    for k, v in (extra or {}).items():
        arrays[k] = v
    container.save(path, arrays)


def load_encoder(path: str | os.PathLike) -> tuple[ParamVector, dict[str, np.ndarray]]:
    """Return (encoder params, remaining entries) from a checkpoint."""
    arrays = container.load(path)
    enc = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("encoder/")}
    rest = {k: v for k, v in arrays.items() if not k.startswith("encoder/")}
    params = ParamVector(enc)
    encoder_dims(params)
    return params, rest
