"""Dense linear algebra, Adam, learning-rate schedules and numerical oracles.

Matrices are plain ``numpy.ndarray`` objects in float64. Named parameter
collections are held in :class:`ParamVector`, whose flattening order is
lexicographic by segment name so finite-difference checks and optimizer
state line up deterministically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import NumericError, RangeError, ShapeError, UnsupportedSizeError

SVD_MAX_DIM = 512
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: non-finite entries")
    return m


class ParamVector:
    """Immutable named collection of float64 arrays.

    Segments are stored as read-only copies. ``flatten`` concatenates the
    segments in lexicographic name order; ``unflatten`` is its inverse.
    """

    __slots__ = ("_segments",)

    def __init__(self, segments: Mapping[str, object]):
        segs = {}
        for name in sorted(segments):
            if not isinstance(name, str) or not name:
                raise ShapeError(f"segment names must be non-empty strings, got {name!r}")
            arr = np.array(segments[name], dtype=np.float64, copy=True)
            arr.setflags(write=False)
            segs[name] = arr
        self._segments = segs

    @classmethod
    def _wrap(cls, segs: dict[str, np.ndarray]) -> "ParamVector":
        # trusted constructor: arrays already fresh float64, names already sorted
        pv = cls.__new__(cls)
        for a in segs.values():
            a.setflags(write=False)
        pv._segments = segs
        return pv

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._segments)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._segments.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._segments.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def items(self):
        return self._segments.items()

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{v.shape}" for k, v in self._segments.items())
        return f"ParamVector({inner})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector) or self.shapes != other.shapes:
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None

    def check_same_structure(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise ShapeError(f"expected ParamVector, got {type(other).__name__}")
        if self.shapes != other.shapes:
            raise ShapeError(f"structure mismatch: {self.shapes} vs {other.shapes}")

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    def unflatten(self, flat) -> "ParamVector":
        """Build a ParamVector with this structure from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != self.size:
            raise ShapeError(f"flat vector of size {flat.size} does not match {self.size}")
        out, pos = {}, 0
        for k, v in self._segments.items():
            out[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return ParamVector._wrap(out)

    def to_dict(self) -> dict[str, np.ndarray]:
        """Writable copies of every segment."""
        return {k: v.copy() for k, v in self._segments.items()}

    def replace(self, **segments) -> "ParamVector":
        d = dict(self._segments)
        for k, v in segments.items():
            if k not in d:
                raise ShapeError(f"unknown segment {k!r}")
            arr = np.array(v, dtype=np.float64, copy=True)
            if arr.shape != d[k].shape:
                raise ShapeError(f"segment {k!r}: shape {arr.shape} != {d[k].shape}")
            d[k] = arr
        return ParamVector._wrap(d)

    def merge(self, other: "ParamVector") -> "ParamVector":
        """Union of two ParamVectors with disjoint segment names."""
        clash = set(self._segments) & set(other._segments)
        if clash:
            raise ShapeError(f"duplicate segment names: {sorted(clash)}")
        d = {**self._segments, **other._segments}
        return ParamVector._wrap({k: d[k] for k in sorted(d)})

    def select(self, names) -> "ParamVector":
        return ParamVector._wrap({k: self._segments[k] for k in sorted(names)})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector._wrap(
            {k: np.asarray(fn(v), dtype=np.float64).copy() for k, v in self._segments.items()}
        )

    def zeros_like(self) -> "ParamVector":
        return ParamVector._wrap({k: np.zeros(v.shape) for k, v in self._segments.items()})

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_same_structure(other)
        return ParamVector._wrap({k: self[k] + other[k] for k in self})

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_same_structure(other)
        return ParamVector._wrap({k: self[k] - other[k] for k in self})

    def scale(self, c: float) -> "ParamVector":
        return ParamVector._wrap({k: c * v for k, v in self._segments.items()})

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self._segments.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._segments.values())


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``peak_rate`` then linear decay to ``floor_rate``."""

    peak_rate: float
    warmup_steps: int
    total_steps: int
    floor_rate: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise RangeError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise RangeError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})"
            )
        if self.peak_rate < 0 or self.floor_rate < 0:
            raise RangeError("rates must be non-negative")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise RangeError(f"step {step} outside [0, {schedule.total_steps}]")
    peak, warm, total = schedule.peak_rate, schedule.warmup_steps, schedule.total_steps
    if step == total:
        return float(schedule.floor_rate)
    if step < warm:
        return peak * step / warm
    frac = (total - step) / (total - warm)
    return schedule.floor_rate + (peak - schedule.floor_rate) * frac


# ---------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamState:
    step: int
    m: ParamVector
    v: ParamVector
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamVector, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(0, params.zeros_like(), params.zeros_like(), beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamVector, grads: ParamVector,
              rate: float) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    params.check_same_structure(grads)
    params.check_same_structure(state.m)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = params[k] - rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return (ParamVector._wrap(new_p),
            AdamState(t, ParamVector._wrap(new_m), ParamVector._wrap(new_v), b1, b2, eps))


# ---------------------------------------------------------------- oracles


def finite_diff_gradient(f: Callable, x, h: float = 1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` may be a ParamVector (result is a ParamVector of the same structure),
    an array, or a Python float.
    """
    if not h > 0:
        raise RangeError("step h must be positive")
    if isinstance(x, ParamVector):
        flat = x.flatten()
        wrap_in = x.unflatten
        wrap_out = x.unflatten
    else:
        arr = np.asarray(x, dtype=np.float64)
        flat = arr.ravel().copy()
        shape = arr.shape
        wrap_in = lambda v: v.reshape(shape) if shape else float(v[0])  # noqa: E731
        wrap_out = (lambda v: v.reshape(shape)) if shape else (lambda v: float(v[0]))
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(wrap_in(flat.copy())))
        flat[i] = orig - h
        fm = float(f(wrap_in(flat.copy())))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return wrap_out(grad)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``."""
    if isinstance(a, ParamVector):
        a = a.flatten()
    if isinstance(b, ParamVector):
        b = b.flatten()
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _complete_orthonormal(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of U not flagged ``good`` with an orthonormal completion."""
    n, k = U.shape
    U = U.copy()
    basis = [U[:, j] for j in range(k) if good[j]]
    e = 0
    for j in range(k):
        if good[j]:
            continue
        while True:
            cand = np.zeros(n)
            cand[e % n] = 1.0
            e += 1
            for b in basis:
                cand -= (b @ cand) * b
            for b in basis:  # second pass for stability
                cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                break
            if e > 2 * n + k:
                raise NumericError("could not complete orthonormal basis")
        U[:, j] = cand / nrm
        basis.append(U[:, j])
    return U


def svd_small(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``U (r×k), s (k,), V (c×k)`` with ``k = min(r, c)``, ``m = U diag(s) Vᵀ``
    and ``s`` non-negative and descending. Columns of U belonging to zero
    singular values are filled with an arbitrary orthonormal completion.
    """
    a = as_matrix(m, "svd input")
    r, c = a.shape
    if max(r, c) > SVD_MAX_DIM:
        raise UnsupportedSizeError(f"svd_small supports dimensions up to {SVD_MAX_DIM}, got {a.shape}")
    if r < c:
        V, s, U = svd_small(a.T)
        return U, s, V
    if c == 0:
        return np.zeros((r, 0)), np.zeros(0), np.zeros((0, 0))
    A = a.copy()
    V = np.eye(c)
    for _sweep in range(SVD_MAX_SWEEPS):
        rotated = False
        for p in range(c - 1):
            for q in range(p + 1, c):
                ap, aq = A[:, p], A[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if gamma == 0.0 or abs(gamma) <= SVD_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)  # may be inf; t -> 0 then
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta  # asymptote; avoids overflow in the sum below
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                new_p = cs * ap - sn * aq
                A[:, q] = sn * ap + cs * aq
                A[:, p] = new_p
                vp = V[:, p].copy()
                V[:, p] = cs * vp - sn * V[:, q]
                V[:, q] = sn * vp + cs * V[:, q]
        if not rotated:
            break
    s = np.linalg.norm(A, axis=0)
    order = np.argsort(-s, kind="stable")
    s, A, V = s[order], A[:, order], V[:, order]
    # Columns with tiny norms carry large relative rounding error; re-orthogonalize
    # against the stronger columns (changes U diag(s) by O(eps * s_max) only).
    U = np.zeros((r, c))
    good = np.zeros(c, dtype=bool)
    floor = s[0] * 1e-14
    for j in range(c):
        if s[j] <= floor:
            continue
        u = A[:, j] / s[j]
        for _ in range(2):
            u -= U[:, good] @ (U[:, good].T @ u)
        nrm = np.linalg.norm(u)
        if nrm < 0.5:
            continue
        U[:, j] = u / nrm
        good[j] = True
    if not np.all(good):
        U = _complete_orthonormal(U, good)
        s = np.where(good, s, 0.0)
    return U, s, V


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-corrected QR."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))
