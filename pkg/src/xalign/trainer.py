"""Batch construction and training loops for linear mapping and encoder fine-tuning."""
from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .bitext import AlignedWordPair, SentencePair
from .encoder import PretrainedSnapshot, Vocab, encode_batch, encode_batch_backward, encoder_dims, snapshot, words_to_units
from .errors import ConfigError, TrainingError
from .numerics import AdamState, LrSchedule, ParamVector, adam_step, lr_at
from .objectives import (AlignedStateBatch, MappingMatrix, SimilarityHead, l2_loss, linear_map_loss,
                         orthogonality_update, reg_hidden, reg_param, strong_loss, weak_loss)

log = logging.getLogger(__name__)

OBJECTIVES = ("none", "procrustes", "linear", "l2", "weak", "strong")
FINETUNE_MODES = ("l2", "weak", "strong")
CONTRASTIVE_MODES = ("weak", "strong")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "weak"
    batch_size: int = 128
    total_steps: int = 2000
    warmup_steps: int = 80
    peak_rate: float = 1e-3
    max_seq_len: int = 96
    lam: float = 0.01
    tau: float = 0.1
    beta: float = 0.01
    regularizer: str = "param"
    linear_steps: int = 2000
    linear_peak_rate: float = 3e-3
    head_identity_init: bool = True
    ibm1_iterations: int = 5

    def __post_init__(self):
        if self.mode not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.mode!r}; valid: {', '.join(OBJECTIVES)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode in CONTRASTIVE_MODES and self.batch_size < 2:
            raise ConfigError("contrastive objectives need batch_size >= 2")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps exceeds total_steps")
        if self.regularizer not in ("param", "hidden", "none"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.regularizer == "hidden" and self.mode in CONTRASTIVE_MODES:
            raise ConfigError("the hidden-state regularizer is only wired for the l2 objective")
        if not self.tau > 0 or self.lam < 0 or not 0 < self.beta < 1:
            raise ConfigError("need tau > 0, lam >= 0 and 0 < beta < 1")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # Published schedule: batch 128, 100k steps, 4k warmup, lr 1e-4, length 96,
    # linear mapping decayed from 1e-4 to 0 over 20k steps, lambda = 1.
    "paper": RunConfig(batch_size=128, total_steps=100_000, warmup_steps=4000, peak_rate=1e-4,
                       max_seq_len=96, lam=1.0, linear_steps=20_000, linear_peak_rate=1e-4),
    "desk": RunConfig(),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class BatchItem:
    pair_id: int
    src_idx: int
    tgt_idx: int
    lang: str
    index: int          # position in the input pair list


@dataclass
class BatchPlan:
    batches: list[list[BatchItem]]
    languages: tuple[str, ...]
    short_final: bool = False
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.batches)


def _allocate(remaining: dict[str, int], size: int) -> dict[str, int]:
    """Per-language quota for one batch: one slot per non-empty language, rest by largest remainder."""
    live = [l for l in remaining if remaining[l] > 0]
    alloc = {l: 0 for l in remaining}
    if size >= len(live):
        for l in live:
            alloc[l] = 1
        left = size - len(live)
    else:
        left = size
    total = sum(remaining[l] - alloc[l] for l in live)
    if left > 0 and total > 0:
        shares = {l: left * (remaining[l] - alloc[l]) / total for l in live}
        base = {l: math.floor(shares[l]) for l in live}
        spare = left - sum(base.values())
        order = sorted(live, key=lambda l: (-(shares[l] - base[l]), l))
        for l in order[:spare]:
            base[l] += 1
        for l in live:
            alloc[l] += base[l]
    for l in live:
        alloc[l] = min(alloc[l], remaining[l])
    # fill any gap caused by capping, largest pools first
    gap = size - sum(alloc.values())
    for l in sorted(live, key=lambda l: (-(remaining[l] - alloc[l]), l)):
        if gap <= 0:
            break
        extra = min(gap, remaining[l] - alloc[l])
        alloc[l] += extra
        gap -= extra
    return alloc


def build_batches(pairs: Sequence[AlignedWordPair], config: RunConfig, epoch: int = 0,
                  unit_positions: Callable[[AlignedWordPair], tuple[int, int]] | None = None) -> BatchPlan:
    """One epoch of batches, sampled without replacement and stratified by language.

    Each batch takes at least one pair from every language that still has
    pairs left; the remaining slots are split in proportion to what is left.
    Pairs whose word (or, given ``unit_positions``, first unit) lies beyond
    ``max_seq_len`` are dropped, mirroring sentence truncation.
    """
    if not pairs:
        raise ConfigError("build_batches needs at least one aligned pair")
    rng = np.random.default_rng([config.seed, epoch])
    pools: dict[str, list[BatchItem]] = {}
    dropped = 0
    for k, p in enumerate(pairs):
        si, ti = unit_positions(p) if unit_positions else (p.src_idx, p.tgt_idx)
        if si >= config.max_seq_len or ti >= config.max_seq_len:
            dropped += 1
            continue
        pools.setdefault(p.lang, []).append(BatchItem(p.pair_id, p.src_idx, p.tgt_idx, p.lang, k))
    langs = tuple(sorted(pools))
    if len(langs) < 2:
        log.debug("batch plan covers a single language: %s", langs)
    queues = {}
    for l in langs:
        order = rng.permutation(len(pools[l]))
        queues[l] = [pools[l][i] for i in order]
    pos = {l: 0 for l in langs}
    batches = []
    remaining = {l: len(queues[l]) for l in langs}
    while sum(remaining.values()) > 0:
        size = min(config.batch_size, sum(remaining.values()))
        alloc = _allocate(remaining, size)
        picked = {l: queues[l][pos[l]:pos[l] + alloc[l]] for l in langs}
        batch = []
        for r in range(max(alloc.values())):
            for l in langs:
                if r < len(picked[l]):
                    batch.append(picked[l][r])
        for l in langs:
            pos[l] += alloc[l]
            remaining[l] -= alloc[l]
        batches.append(batch)
    short = bool(batches) and len(batches[-1]) < config.batch_size
    return BatchPlan(batches, langs, short, dropped)


def check_multilingual(plan: BatchPlan, expected_languages: int) -> None:
    if expected_languages >= 2 and len(plan.languages) < 2:
        warnings.warn(f"expected {expected_languages} languages but all pairs come from "
                      f"{plan.languages or 'none'}", stacklevel=2)


# ---------------------------------------------------------------- linear mapping


@dataclass
class LinearMappingResult:
    mappings: dict[tuple[str, int], MappingMatrix]
    history: dict[tuple[str, int], list[tuple[int, float, float]]] = field(default_factory=dict)


def _stable_seed(*parts) -> int:
    return zlib.crc32("|".join(map(str, parts)).encode("utf-8"))


def train_linear_mapping(features: Mapping[str, Mapping[int, tuple[np.ndarray, np.ndarray]]],
                         config: RunConfig, init: np.ndarray | None = None) -> LinearMappingResult:
    """Learn one orthogonal-ish ``W`` per (target language, layer) on static features.

    Each step takes one Adam step on ``||S - T W||^2`` over a minibatch, then
    one orthogonality update with ``config.beta``. The rate decays linearly
    from ``linear_peak_rate`` to 0 over ``linear_steps``. The full-data loss
    after each step is recorded as ``(step, loss, rate)``.
    """
    sched = LrSchedule(config.linear_peak_rate, 0, config.linear_steps)
    mappings, history = {}, {}
    for lang in sorted(features):
        for layer in sorted(features[lang]):
            S, T = (np.asarray(a, dtype=np.float64) for a in features[lang][layer])
            n, d = T.shape
            W = np.eye(d) if init is None else np.array(init, dtype=np.float64)
            params = ParamVector({"W": W})
            state = AdamState.fresh(params)
            rng = np.random.default_rng([config.seed, _stable_seed(lang, layer)])
            hist = []
            for step in range(config.linear_steps):
                rate = lr_at(sched, step)
                if config.batch_size < n:
                    rows = rng.choice(n, config.batch_size, replace=False)
                    Sb, Tb = S[rows], T[rows]
                else:
                    Sb, Tb = S, T
                with np.errstate(over="ignore", invalid="ignore"):
                    batch_loss, g = linear_map_loss(Sb, Tb, params["W"])
                    if math.isfinite(batch_loss) and np.all(np.isfinite(g)):
                        params, state = adam_step(state, params, ParamVector({"W": g}), rate)
                    W = params["W"]
                    if np.all(np.isfinite(W)):
                        W = orthogonality_update(W, config.beta)
                        R = S - T @ W
                        full = float(np.sum(R * R))
                    else:
                        full = math.nan
                if not (math.isfinite(batch_loss) and math.isfinite(full)):
                    raise TrainingError(f"non-finite loss: lang={lang} layer={layer} step={step} "
                                        f"rate={rate:g} batch_loss={batch_loss!r} |W|={np.linalg.norm(W):g}")
                params = params.replace(W=W)
                hist.append((step, full, rate))
            mappings[(lang, layer)] = MappingMatrix(np.array(params["W"]), lang, layer)
            history[(lang, layer)] = hist
    return LinearMappingResult(mappings, history)


# ---------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class EncodedSide:
    ids: np.ndarray            # unit ids, truncated to max_seq_len
    first_unit: np.ndarray     # per word; -1 when the word was truncated away


def encode_side(words: Sequence[str], vocab: Vocab, max_len: int) -> EncodedSide:
    units, spans = words_to_units(words)
    ids = np.asarray(vocab.ids(units[:max_len]), dtype=np.int64)
    first = np.array([s.start if s.start < max_len else -1 for s in spans], dtype=np.int64)
    return EncodedSide(ids, first)


@dataclass
class PreparedCorpus:
    src: dict[int, EncodedSide]
    tgt: dict[int, EncodedSide]

    @classmethod
    def build(cls, pairs: Sequence[SentencePair], vocab: Vocab, max_len: int) -> "PreparedCorpus":
        return cls({p.pair_id: encode_side(p.src, vocab, max_len) for p in pairs},
                   {p.pair_id: encode_side(p.tgt, vocab, max_len) for p in pairs})

    def unit_positions(self, p: AlignedWordPair) -> tuple[int, int]:
        s = self.src[p.pair_id].first_unit[p.src_idx]
        t = self.tgt[p.pair_id].first_unit[p.tgt_idx]
        big = 1 << 30
        return (int(s) if s >= 0 else big, int(t) if t >= 0 else big)


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float          # full objective including the regularizer
    align_loss: float    # alignment term only
    rate: float


@dataclass
class FinetuneResult:
    params: ParamVector
    head: SimilarityHead | None
    history: list[StepRecord]
    snapshot: PretrainedSnapshot


def _head_segments(p: ParamVector) -> list[str]:
    return [k for k in p if k.startswith("head.")]


def finetune_step_loss(enc: ParamVector, head: SimilarityHead | None, corpus: PreparedCorpus,
                       batch: Sequence[BatchItem], config: RunConfig,
                       theta_pre: ParamVector) -> tuple[float, float, ParamVector]:
    """Objective and gradient (encoder ∪ head segments) for one batch."""
    src_ids = sorted({b.pair_id for b in batch})
    tgt_ids = src_ids
    sents = [corpus.src[i].ids for i in src_ids] + [corpus.tgt[i].ids for i in tgt_ids]
    cache = encode_batch(enc, sents)
    n_src = len(src_ids)
    slot = {pid: k for k, pid in enumerate(src_ids)}
    s_rows = np.array([cache.starts[slot[b.pair_id]] + corpus.src[b.pair_id].first_unit[b.src_idx]
                       for b in batch])
    t_rows = np.array([cache.starts[n_src + slot[b.pair_id]] + corpus.tgt[b.pair_id].first_unit[b.tgt_idx]
                       for b in batch])
    H = cache.final
    abatch = AlignedStateBatch(H[s_rows], H[t_rows], tuple(b.lang for b in batch))
    grad_final = np.zeros_like(H)
    head_grads = None
    extra = 0.0
    if config.mode == "l2":
        align, dS, dT = l2_loss(abatch)
        if config.regularizer == "hidden":
            src_rows = np.arange(cache.starts[n_src])
            pre = encode_batch(theta_pre, sents[:n_src]).final
            r, g = reg_hidden(H[src_rows], pre)
            extra = config.lam * r
            grad_final[src_rows] += config.lam * g
    elif config.mode == "weak":
        align, dS, dT, head_grads = weak_loss(abatch, head, config.tau)
    elif config.mode == "strong":
        align, dS, dT, head_grads = strong_loss(abatch, head, config.tau)
    else:
        raise ConfigError(f"mode {config.mode!r} is not a fine-tuning objective")
    np.add.at(grad_final, s_rows, dS)
    np.add.at(grad_final, t_rows, dT)
    grads = encode_batch_backward(enc, cache, grad_final)
    if config.regularizer == "param" and config.lam > 0:
        r, g = reg_param(enc, theta_pre)
        extra = config.lam * r
        grads = grads + g.scale(config.lam)
    if head_grads is not None:
        grads = grads.merge(head_grads)
    return align + extra, align, grads


def train_finetune(params: ParamVector, pairs: Sequence[SentencePair],
                   aligned: Sequence[AlignedWordPair], vocab: Vocab, config: RunConfig,
                   head: SimilarityHead | None = None,
                   on_step: Callable[[StepRecord], None] | None = None) -> FinetuneResult:
    """Fine-tune the encoder on aligned word pairs with the l2, weak or strong objective.

    The pretrained snapshot is taken before the first step and every
    objective adds ``lam`` times the chosen regularizer. Word states are the
    final-layer states of each word's first unit.
    """
    if config.mode not in FINETUNE_MODES:
        raise ConfigError(f"train_finetune handles {FINETUNE_MODES}, got {config.mode!r}")
    _, d, _ = encoder_dims(params)
    snap = snapshot(params)
    theta_pre = snap.params
    contrastive = config.mode in CONTRASTIVE_MODES
    if contrastive and head is None:
        head = SimilarityHead.init(d, seed=config.seed, identity=config.head_identity_init)
    if not contrastive:
        head = None
    corpus = PreparedCorpus.build(pairs, vocab, config.max_seq_len)
    live = params if head is None else params.merge(head.params)
    state = AdamState.fresh(live)
    sched = LrSchedule(config.peak_rate, config.warmup_steps, config.total_steps)
    history: list[StepRecord] = []
    epoch, plan, cursor = 0, None, 0
    n_langs = len({p.lang for p in aligned})
    enc_names = list(params.names)
    for step in range(config.total_steps):
        while plan is None or cursor >= len(plan.batches):
            plan = build_batches(aligned, config, epoch, corpus.unit_positions)
            if epoch == 0:
                check_multilingual(plan, n_langs)
            if contrastive and plan.batches and len(plan.batches[-1]) < 2:
                plan.batches.pop()
            if not plan.batches:
                raise ConfigError("no usable batches: too few aligned pairs for this batch size")
            epoch, cursor = epoch + 1, 0
        batch = plan.batches[cursor]
        cursor += 1
        enc = live.select(enc_names)
        cur_head = SimilarityHead(live.select(_head_segments(live))) if head is not None else None
        loss, align, grads = finetune_step_loss(enc, cur_head, corpus, batch, config, theta_pre)
        rate = lr_at(sched, step)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (mode={config.mode}, rate={rate:g}, "
                                f"align={align!r})")
        rec = StepRecord(step, loss, align, rate)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        live, state = adam_step(state, live, grads, rate)
    final_enc = live.select(enc_names)
    final_head = SimilarityHead(live.select(_head_segments(live))) if head is not None else None
    return FinetuneResult(final_enc, final_head, history, snap)


def static_features(params: ParamVector, pairs: Sequence[SentencePair],
                    aligned: Sequence[AlignedWordPair], vocab: Vocab, max_len: int,
                    layers: Sequence[int] | None = None) -> dict[str, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Per-language, per-layer (S, T) row pairs from the frozen encoder."""
    from .encoder import encode

    _, _, L = encoder_dims(params)
    layers = list(range(L + 1)) if layers is None else list(layers)
    corpus = PreparedCorpus.build(pairs, vocab, max_len)
    cache_src, cache_tgt = {}, {}
    rows: dict[str, dict[int, tuple[list, list]]] = {}
    for p in aligned:
        si, ti = corpus.unit_positions(p)
        if si >= max_len or ti >= max_len:
            continue
        if p.pair_id not in cache_src:
            cache_src[p.pair_id] = encode(params, corpus.src[p.pair_id].ids)
            cache_tgt[p.pair_id] = encode(params, corpus.tgt[p.pair_id].ids)
        per = rows.setdefault(p.lang, {l: ([], []) for l in layers})
        for l in layers:
            per[l][0].append(cache_src[p.pair_id][l][si])
            per[l][1].append(cache_tgt[p.pair_id][l][ti])
    return {lang: {l: (np.array(s), np.array(t)) for l, (s, t) in per.items()} for lang, per in rows.items()}


def write_loss_log(path, history: Sequence[StepRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tloss\tlr\n")
        for r in history:
            fh.write(f"{r.step}\t{r.loss!r}\t{r.rate!r}\n")
