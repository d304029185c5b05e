"""Alignment objectives with analytic gradients.

Conventions: ``S`` holds source (English) rows, ``T`` the corresponding
target-language rows. Mapping matrices act on the target side, so the
linear-mapping residual is ``S - T @ W``.

The contrastive losses are the *negated* batch log-likelihoods, so smaller is
better and minimizing pulls aligned pairs together:

    weak   = -1/(2B) * sum_i [ log softmax_j(sim(s_i, t_j)/tau)[i]
                              + log softmax_j(sim(s_j, t_i)/tau)[i] ]
    strong = -1/(2B) * sum_{h in H} log softmax_{h' != h}(sim(h, h')/tau)[aligned(h)]

with ``H = {s_1..s_B, t_1..t_B}`` and ``sim(a, b) = cos(f(a), f(b))`` for the
learned feed-forward head ``f``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ParamVector, as_matrix, svd_small

NORM_EPS = 1e-12
MODES = ("linear", "l2", "weak", "strong")
REGULARIZERS = ("param", "hidden", "none")


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0
    tau: float = 0.1
    beta: float = 0.01
    mode: str = "weak"
    regularizer: str = "param"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")


@dataclass
class AlignedStateBatch:
    """Paired rows ``S[i] <-> T[i]``; ``S_bar``/``S_bar_pre`` are optional full
    source-sentence states (live and pretrained) for the hidden-state regularizer."""

    S: np.ndarray
    T: np.ndarray
    langs: tuple = ()
    S_bar: np.ndarray | None = None
    S_bar_pre: np.ndarray | None = None

    def __post_init__(self):
        self.S = as_matrix(self.S, "S")
        self.T = as_matrix(self.T, "T")
        if self.S.shape != self.T.shape:
            raise ShapeError(f"S {self.S.shape} and T {self.T.shape} differ in shape")

    @property
    def size(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class MappingMatrix:
    W: np.ndarray
    lang: str = "tgt"
    layer: int = 0
    degenerate: bool = False

    def apply(self, T: np.ndarray) -> np.ndarray:
        return np.asarray(T) @ self.W


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear mapping


def linear_map_loss(S_l, T_l, W) -> tuple[float, np.ndarray]:
    """``||S - T W||_F^2`` and its gradient ``-2 T^T (S - T W)``."""
    W = W.W if isinstance(W, MappingMatrix) else W
    S_l, T_l, W = as_matrix(S_l, "S"), as_matrix(T_l, "T"), as_matrix(W, "W")
    if S_l.shape[0] != T_l.shape[0] or T_l.shape[1] != W.shape[0] or W.shape[1] != S_l.shape[1]:
        raise ShapeError(f"incompatible shapes S{S_l.shape} T{T_l.shape} W{W.shape}")
    R = S_l - T_l @ W
    return float(np.sum(R * R)), -2.0 * T_l.T @ R


def orthogonality_update(W, beta: float = 0.01) -> np.ndarray:
    """``(1 + beta) W - beta (W W^T) W``; pulls singular values toward 1."""
    W = as_matrix(W, "W")
    if W.shape[0] != W.shape[1]:
        raise ShapeError(f"orthogonality update needs a square matrix, got {W.shape}")
    return (1.0 + beta) * W - beta * (W @ W.T) @ W


def procrustes_svd(S, T, lang: str = "tgt", layer: int = 0) -> MappingMatrix:
    """Orthogonal ``W = U V^T`` minimizing ``||S - T W||`` where ``U s V^T = svd(T^T S)``.

    If ``T^T S`` is rank deficient the solution is not unique; the returned W
    is still orthogonal and ``degenerate`` is set.
    """
    S, T = as_matrix(S, "S"), as_matrix(T, "T")
    _same_shape(S, T, "procrustes")
    U, s, V = svd_small(T.T @ S)
    degenerate = bool(s.size == 0 or s[-1] <= 1e-10 * max(s[0], 1e-300))
    return MappingMatrix(U @ V.T, lang, layer, degenerate)


# ---------------------------------------------------------------- L2 + regularizers


def l2_loss(batch: AlignedStateBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """``mean_i ||s_i - t_i||^2`` with gradients w.r.t. S and T."""
    B = batch.size
    if B < 1:
        raise ShapeError("l2_loss needs at least one aligned pair")
    D = batch.S - batch.T
    gS = 2.0 * D / B
    return float(np.sum(D * D) / B), gS, -gS


def reg_hidden(S_bar, S_bar_pre) -> tuple[float, np.ndarray]:
    S_bar, S_bar_pre = as_matrix(S_bar, "S_bar"), as_matrix(S_bar_pre, "S_bar_pre")
    _same_shape(S_bar, S_bar_pre, "reg_hidden")
    D = S_bar - S_bar_pre
    return float(np.sum(D * D)), 2.0 * D


def reg_param(theta: ParamVector, theta_pre: ParamVector) -> tuple[float, ParamVector]:
    theta.check_same_structure(theta_pre)
    D = theta - theta_pre
    return D.sq_norm(), D.scale(2.0)


def combined_l2(batch: AlignedStateBatch, theta: ParamVector | None = None,
                theta_pre: ParamVector | None = None, lam: float = 1.0,
                regularizer: str = "param") -> tuple[float, dict]:
    """L2 alignment plus ``lam`` times the chosen regularizer.

    Returns the loss and a dict of gradients keyed ``S``, ``T`` and either
    ``theta`` (parameter regularizer) or ``S_bar`` (hidden-state regularizer).
    """
    loss, gS, gT = l2_loss(batch)
    grads: dict = {"S": gS, "T": gT}
    if regularizer == "param":
        if theta is None or theta_pre is None:
            raise ConfigError("parameter regularizer needs theta and theta_pre")
        r, g = reg_param(theta, theta_pre)
        grads["theta"] = g.scale(lam)
    elif regularizer == "hidden":
        if batch.S_bar is None or batch.S_bar_pre is None:
            raise ConfigError("hidden-state regularizer needs S_bar and S_bar_pre in the batch")
        r, g = reg_hidden(batch.S_bar, batch.S_bar_pre)
        grads["S_bar"] = lam * g
    elif regularizer == "none":
        r = 0.0
    else:
        raise ConfigError(f"unknown regularizer {regularizer!r}")
    return loss + lam * r, grads


# ---------------------------------------------------------------- similarity head


def head_widths(d: int) -> tuple[int, int, int]:
    """(input, hidden, output) widths; ``d = 768`` gives 768-768-128."""
    return d, d, math.ceil(d / 6)


@dataclass(frozen=True)
class SimilarityHead:
    """``f(x) = relu(x W1 + b1) W2 + b2``."""

    params: ParamVector = field(repr=False)

    @classmethod
    def create(cls, w1, b1, w2, b2) -> "SimilarityHead":
        return cls(ParamVector({"head.w1": w1, "head.b1": b1, "head.w2": w2, "head.b2": b2}))

    @classmethod
    def init(cls, d: int, seed: int = 0, identity: bool = True,
             widths: tuple[int, int, int] | None = None) -> "SimilarityHead":
        """New head. ``identity=True`` starts from the identity truncation with a unit
        hidden bias, so inputs in (-1, 1) pass the rectifier unchanged and the learned
        similarity starts as the cosine of ``(x + 1)[:p]``."""
        _, h, p = widths or head_widths(d)
        if identity:
            w1 = np.eye(d, h)
            b1 = np.ones(h)
            w2 = np.eye(h, p)
            b2 = np.zeros(p)
        else:
            rng = np.random.default_rng(seed)
            w1 = rng.normal(0.0, 1.0 / math.sqrt(d), (d, h))
            b1 = np.zeros(h)
            w2 = rng.normal(0.0, 1.0 / math.sqrt(h), (h, p))
            b2 = np.zeros(p)
        return cls.create(w1, b1, w2, b2)

    @property
    def widths(self) -> tuple[int, int, int]:
        d, h = self.params["head.w1"].shape
        return d, h, self.params["head.w2"].shape[1]

    def forward(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.widths[0]:
            raise ShapeError(f"head expects width {self.widths[0]}, got {X.shape[1]}")
        p = self.params
        return np.maximum(X @ p["head.w1"] + p["head.b1"], 0.0) @ p["head.w2"] + p["head.b2"]

    def _forward_cache(self, X):
        p = self.params
        pre = X @ p["head.w1"] + p["head.b1"]
        act = np.maximum(pre, 0.0)
        return act @ p["head.w2"] + p["head.b2"], (X, pre, act)

    def _backward(self, cache, dZ) -> tuple[np.ndarray, dict]:
        X, pre, act = cache
        p = self.params
        g = {"head.w2": act.T @ dZ, "head.b2": dZ.sum(axis=0)}
        dpre = (dZ @ p["head.w2"].T) * (pre > 0)
        g["head.w1"] = X.T @ dpre
        g["head.b1"] = dpre.sum(axis=0)
        return dpre @ p["head.w1"].T, g


def _normalize(Z):
    n = np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), NORM_EPS)
    return Z / n, n


def _normalize_backward(Un, n, dU):
    return (dU - Un * np.sum(Un * dU, axis=1, keepdims=True)) / n


def sim(a, b, head: SimilarityHead) -> float:
    """Learned cosine similarity ``cos(f(a), f(b))``; denominator guarded by 1e-12."""
    fa = head.forward(a)[0]
    fb = head.forward(b)[0]
    return float(fa @ fb / max(np.linalg.norm(fa) * np.linalg.norm(fb), NORM_EPS))


# ---------------------------------------------------------------- contrastive


def _log_softmax_rows(L):
    m = L.max(axis=1, keepdims=True)
    Z = L - m
    lse = np.log(np.sum(np.exp(Z), axis=1, keepdims=True))
    return Z - lse


def weak_from_sims(sims, tau: float) -> tuple[float, np.ndarray]:
    """Weak loss from a ``B×B`` similarity matrix ``sims[i, j] = sim(s_i, t_j)``.

    Returns the loss and its gradient w.r.t. ``sims``.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    sims = np.asarray(sims, dtype=np.float64)
    B = sims.shape[0]
    if B < 2:
        raise ConfigError("contrastive losses need a batch of at least 2 pairs")
    L = sims / tau
    lr_ = _log_softmax_rows(L)          # s_i against all t_j
    lc_ = _log_softmax_rows(L.T)        # t_i against all s_j
    loss = -(np.trace(lr_) + np.trace(lc_)) / (2 * B)
    eye = np.eye(B)
    dL = ((np.exp(lr_) - eye) + (np.exp(lc_) - eye).T) / (2 * B)
    return float(loss), dL / tau


def strong_from_sims(sims, tau: float) -> tuple[float, np.ndarray]:
    """Strong loss from the ``2B×2B`` similarity matrix over ``[s_1..s_B, t_1..t_B]``.

    The diagonal is ignored (``h' != h``); gradient w.r.t. ``sims`` is returned
    with a zero diagonal.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    if n % 2 or n < 4:
        raise ConfigError("strong loss needs a 2B x 2B similarity matrix with B >= 2")
    B = n // 2
    L = sims / tau
    L = np.where(np.eye(n, dtype=bool), -np.inf, L)
    logp = _log_softmax_rows(L)
    target = np.concatenate([np.arange(B, n), np.arange(B)])
    loss = -np.sum(logp[np.arange(n), target]) / (2 * B)
    P = np.exp(logp)
    P[np.arange(n), target] -= 1.0
    return float(loss), P / (2 * B) / tau


def _contrastive(batch: AlignedStateBatch, head: SimilarityHead, tau: float, strong: bool):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    B = batch.size
    if B < 2:
        raise ConfigError("contrastive losses need a batch of at least 2 pairs")
    if batch.S.shape[1] != head.widths[0]:
        raise ShapeError(f"head expects width {head.widths[0]}, got {batch.S.shape[1]}")
    X = np.vstack([batch.S, batch.T])
    Z, cache = head._forward_cache(X)
    Un, n = _normalize(Z)
    if strong:
        loss, dsim = strong_from_sims(Un @ Un.T, tau)
        dUn = (dsim + dsim.T) @ Un
    else:
        U_s, U_t = Un[:B], Un[B:]
        loss, dsim = weak_from_sims(U_s @ U_t.T, tau)
        dUn = np.vstack([dsim @ U_t, dsim.T @ U_s])
    dZ = _normalize_backward(Un, n, dUn)
    dX, hg = head._backward(cache, dZ)
    return loss, dX[:B], dX[B:], ParamVector(hg)


def weak_loss(batch: AlignedStateBatch, head: SimilarityHead,
              tau: float = 0.1) -> tuple[float, np.ndarray, np.ndarray, ParamVector]:
    """Weak contrastive alignment: negatives come from the other language only.

    Returns ``(loss, dS, dT, d_head)``.
    """
    return _contrastive(batch, head, tau, strong=False)


def strong_loss(batch: AlignedStateBatch, head: SimilarityHead,
                tau: float = 0.1) -> tuple[float, np.ndarray, np.ndarray, ParamVector]:
    """Strong contrastive alignment: negatives come from both languages."""
    return _contrastive(batch, head, tau, strong=True)
