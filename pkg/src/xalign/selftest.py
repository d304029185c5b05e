"""Built-in numerical self-checks: gradients, orthogonality dynamics, GDFA against its oracle.

Each gradient check builds a random instance, computes the analytic gradient
and compares it with central finite differences. ``broken`` names checks whose
analytic gradient is deliberately perturbed, to prove the harness catches it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bitext import AlignmentSet, symmetrize_gdfa
from .encoder import encode_batch, encode_batch_backward, init_encoder
from .numerics import ParamVector, finite_diff_gradient, random_orthogonal, relative_error
from .objectives import (AlignedStateBatch, SimilarityHead, combined_l2, l2_loss, linear_map_loss,
                         orthogonality_update, procrustes_svd, reg_hidden, reg_param, strong_loss, weak_loss)
from .oracles import gdfa_bruteforce

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def _corrupt(g, broken: bool):
    if not broken:
        return g
    if isinstance(g, ParamVector):
        return g.map(lambda a: a * 1.01 + 1e-3)
    return np.asarray(g) * 1.01 + 1e-3


def _rel(analytic, numeric) -> float:
    """Relative error; a vanishing numeric gradient makes the comparison vacuous, so it fails."""
    flat = numeric.flatten() if isinstance(numeric, ParamVector) else np.asarray(numeric)
    if np.linalg.norm(flat) < 1e-8:
        return float("inf")
    return relative_error(analytic, numeric)


def _pack(**arrays) -> ParamVector:
    return ParamVector(arrays)


def check_l2_loss(rng, broken=False) -> float:
    B, d = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    x = _pack(S=rng.normal(size=(B, d)), T=rng.normal(size=(B, d)))
    f = lambda p: l2_loss(AlignedStateBatch(p["S"], p["T"]))[0]  # noqa: E731
    _, gS, gT = l2_loss(AlignedStateBatch(x["S"], x["T"]))
    return _rel(_corrupt(_pack(S=gS, T=gT), broken), finite_diff_gradient(f, x, FD_STEP))


def check_reg_hidden(rng, broken=False) -> float:
    n, d = int(rng.integers(1, 8)), int(rng.integers(2, 6))
    pre = rng.normal(size=(n, d))
    x = rng.normal(size=(n, d))
    _, g = reg_hidden(x, pre)
    return _rel(_corrupt(g, broken), finite_diff_gradient(lambda a: reg_hidden(a, pre)[0], x, FD_STEP))


def check_reg_param(rng, broken=False) -> float:
    shapes = {"a": (int(rng.integers(1, 4)), 3), "b": (int(rng.integers(1, 5)),)}
    theta = ParamVector({k: rng.normal(size=s) for k, s in shapes.items()})
    pre = ParamVector({k: rng.normal(size=s) for k, s in shapes.items()})
    _, g = reg_param(theta, pre)
    return _rel(_corrupt(g, broken), finite_diff_gradient(lambda t: reg_param(t, pre)[0], theta, FD_STEP))


def check_combined_l2(rng, broken=False) -> float:
    B, d = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    lam = float(rng.uniform(0.1, 2.0))
    pre = ParamVector({"w": rng.normal(size=(3, 2))})
    x = _pack(S=rng.normal(size=(B, d)), T=rng.normal(size=(B, d)), **{"theta.w": rng.normal(size=(3, 2))})

    def f(p):
        return combined_l2(AlignedStateBatch(p["S"], p["T"]), ParamVector({"w": p["theta.w"]}), pre, lam)[0]

    _, g = combined_l2(AlignedStateBatch(x["S"], x["T"]), ParamVector({"w": x["theta.w"]}), pre, lam)
    analytic = _pack(S=g["S"], T=g["T"], **{"theta.w": g["theta"]["w"]})
    err = _rel(_corrupt(analytic, broken), finite_diff_gradient(f, x, FD_STEP))
    # hidden-state variant
    n = int(rng.integers(1, 5))
    bar_pre = rng.normal(size=(n, d))
    y = _pack(S=x["S"], T=x["T"], S_bar=rng.normal(size=(n, d)))

    def fh(p):
        return combined_l2(AlignedStateBatch(p["S"], p["T"], (), p["S_bar"], bar_pre), lam=lam,
                           regularizer="hidden")[0]

    _, gh = combined_l2(AlignedStateBatch(y["S"], y["T"], (), y["S_bar"], bar_pre), lam=lam, regularizer="hidden")
    analytic = _pack(S=gh["S"], T=gh["T"], S_bar=gh["S_bar"])
    return max(err, _rel(_corrupt(analytic, broken), finite_diff_gradient(fh, y, FD_STEP)))


def check_linear_map_loss(rng, broken=False) -> float:
    n, d = int(rng.integers(2, 10)), int(rng.integers(2, 6))
    S, T = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    W = rng.normal(size=(d, d))
    _, g = linear_map_loss(S, T, W)
    return _rel(_corrupt(g, broken), finite_diff_gradient(lambda w: linear_map_loss(S, T, w)[0], W, FD_STEP))


def _contrastive_check(fn, rng, broken) -> float:
    # d >= 7 so the head output is at least 2 wide (a 1-wide cosine is constant)
    B, d = int(rng.integers(2, 5)), int(rng.integers(7, 13))
    tau = float(rng.uniform(0.1, 1.0))
    head = SimilarityHead.init(d, seed=int(rng.integers(1 << 30)), identity=False)
    # keep pre-activations away from the rectifier kink
    head = SimilarityHead(head.params.replace(**{"head.b1": rng.uniform(0.5, 1.0, d)}))
    x = _pack(S=rng.normal(scale=0.3, size=(B, d)), T=rng.normal(scale=0.3, size=(B, d))).merge(head.params)

    def f(p):
        return fn(AlignedStateBatch(p["S"], p["T"]), SimilarityHead(p.select(head.params.names)), tau)[0]

    _, dS, dT, dh = fn(AlignedStateBatch(x["S"], x["T"]), head, tau)
    analytic = _pack(S=dS, T=dT).merge(dh)
    return _rel(_corrupt(analytic, broken), finite_diff_gradient(f, x, FD_STEP))


def check_weak_loss(rng, broken=False) -> float:
    return _contrastive_check(weak_loss, rng, broken)


def check_strong_loss(rng, broken=False) -> float:
    return _contrastive_check(strong_loss, rng, broken)


def check_encoder_backward(rng, broken=False) -> float:
    V, d = 7, int(rng.integers(2, 5))
    params = init_encoder(V, d, layers=2, seed=int(rng.integers(1 << 30)), sigma=0.3)
    sents = [rng.integers(0, V, int(rng.integers(1, 5))) for _ in range(int(rng.integers(1, 4)))]
    n = sum(len(s) for s in sents)
    weights = rng.normal(size=(n, d))
    f = lambda p: float(np.sum(encode_batch(p, sents).final * weights))  # noqa: E731
    g = encode_batch_backward(params, encode_batch(params, sents), weights)
    return _rel(_corrupt(g, broken), finite_diff_gradient(f, params, FD_STEP))


GRADIENT_CHECKS: dict[str, Callable] = {
    "l2_loss": check_l2_loss,
    "reg_hidden": check_reg_hidden,
    "reg_param": check_reg_param,
    "combined_l2": check_combined_l2,
    "linear_map_loss": check_linear_map_loss,
    "weak_loss": check_weak_loss,
    "strong_loss": check_strong_loss,
    "encoder_backward": check_encoder_backward,
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    worst: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<20} max_err={self.worst:.3e} tol={self.tol:.0e} {self.detail}".rstrip()


def _orthogonality_checks(rng) -> list[CheckResult]:
    worst = 0.0
    for _ in range(10):
        Q = random_orthogonal(int(rng.integers(2, 12)), rng)
        worst = max(worst, float(np.max(np.abs(orthogonality_update(Q, 0.01) - Q))))
    fixed = CheckResult("orth_fixed_point", worst <= 1e-12, worst, 1e-12)
    worst = 0.0
    for c in (0.6, 0.9, 1.4):
        Q = random_orthogonal(6, rng)
        W = c * Q
        for _ in range(2000):
            W = orthogonality_update(W, 0.01)
        worst = max(worst, float(np.linalg.norm(W @ W.T - np.eye(6))))
    conv = CheckResult("orth_convergence", worst < 1e-6, worst, 1e-6, "c in {0.6, 0.9, 1.4}")
    S = rng.normal(size=(200, 8))
    Q = random_orthogonal(8, rng)
    err = float(np.linalg.norm(procrustes_svd(S, S @ Q.T).W - Q))
    return [fixed, conv, CheckResult("procrustes_recovery", err < 1e-6, err, 1e-6)]


def _random_links(rng, m, n):
    k = int(rng.integers(0, m * n + 1))
    cells = rng.choice(m * n, k, replace=False)
    return frozenset((int(c) // n, int(c) % n) for c in cells)


def _gdfa_check(rng, cases: int) -> CheckResult:
    mismatches = 0
    for _ in range(cases):
        m, n = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        F, B = _random_links(rng, m, n), _random_links(rng, m, n)
        got = set(symmetrize_gdfa(AlignmentSet(F, m, n), AlignmentSet(B, m, n)).links)
        if got != gdfa_bruteforce(F, B, m, n) or not (F & B) <= got <= (F | B):
            mismatches += 1
    return CheckResult("gdfa_oracle", mismatches == 0, float(mismatches), 0.0, f"{cases} cases")


def run_selftest(seed: int = 0, instances: int = 5, gdfa_cases: int = 300,
                 broken: frozenset[str] = frozenset()) -> list[CheckResult]:
    unknown = set(broken) - set(GRADIENT_CHECKS)
    if unknown:
        raise KeyError(f"unknown check(s) {sorted(unknown)}; valid: {', '.join(GRADIENT_CHECKS)}")
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in GRADIENT_CHECKS.items():
        t0 = time.perf_counter()
        worst = max(fn(rng, name in broken) for _ in range(instances))
        out.append(CheckResult(name, worst < GRAD_TOL, worst, GRAD_TOL,
                               f"{instances} instances, {time.perf_counter() - t0:.2f}s"))
    out += _orthogonality_checks(rng)
    out.append(_gdfa_check(rng, gdfa_cases))
    return out
