import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from xalign.errors import NumericError, RangeError, ShapeError, UnsupportedSizeError
from xalign.numerics import (AdamState, LrSchedule, ParamVector, adam_step, finite_diff_gradient,
                             lr_at, random_orthogonal, relative_error, svd_small)


def pv(**kw):
    return ParamVector({k: np.asarray(v, dtype=float) for k, v in kw.items()})


class TestParamVector:
    def test_flatten_is_sorted_by_name(self):
        p = pv(b=[3.0, 4.0], a=[[1.0, 2.0]])
        assert p.names == ("a", "b")
        np.testing.assert_array_equal(p.flatten(), [1, 2, 3, 4])

    def test_unflatten_roundtrip(self, rng):
        p = pv(w=rng.normal(size=(3, 2)), b=rng.normal(size=4))
        assert p.unflatten(p.flatten()) == p

    def test_unflatten_wrong_length(self):
        with pytest.raises(ShapeError):
            pv(a=[1.0, 2.0]).unflatten(np.zeros(3))

    def test_segments_are_read_only(self):
        p = pv(a=[1.0, 2.0])
        with pytest.raises(ValueError):
            p["a"][0] = 5.0

    def test_input_array_not_aliased(self):
        a = np.array([1.0, 2.0])
        p = ParamVector({"a": a})
        a[0] = 9.0
        assert p["a"][0] == 1.0

    def test_arithmetic(self):
        p, q = pv(a=[1.0, 2.0]), pv(a=[0.5, -1.0])
        np.testing.assert_allclose((p - q)["a"], [0.5, 3.0])
        np.testing.assert_allclose((p + q).scale(2.0)["a"], [3.0, 2.0])
        assert p.sq_norm() == 5.0

    def test_structure_mismatch(self):
        with pytest.raises(ShapeError):
            pv(a=[1.0]) + pv(b=[1.0])
        with pytest.raises(ShapeError):
            pv(a=[1.0]) + pv(a=[1.0, 2.0])

    def test_merge_rejects_overlap(self):
        with pytest.raises(ShapeError):
            pv(a=[1.0]).merge(pv(a=[2.0]))

    def test_select_and_replace(self):
        p = pv(a=[1.0], b=[2.0])
        assert p.select(["b"]).names == ("b",)
        assert p.replace(a=[7.0])["a"][0] == 7.0
        with pytest.raises(ShapeError):
            p.replace(a=[1.0, 2.0])


class TestSchedule:
    @pytest.mark.parametrize("step, expected", [
        (0, 0.0), (5, 0.5e-3), (10, 1e-3), (55, 0.5e-3), (100, 0.0),
    ])
    def test_warmup_then_decay(self, step, expected):
        s = LrSchedule(1e-3, 10, 100)
        assert lr_at(s, step) == pytest.approx(expected, abs=1e-18)

    def test_no_warmup_starts_at_peak(self):
        assert lr_at(LrSchedule(2.0, 0, 4), 0) == 2.0
        assert lr_at(LrSchedule(2.0, 0, 4), 2) == 1.0

    def test_floor(self):
        s = LrSchedule(1.0, 0, 10, floor_rate=0.1)
        assert lr_at(s, 10) == pytest.approx(0.1)
        assert lr_at(s, 5) == pytest.approx(0.55)

    @pytest.mark.parametrize("step", [-1, 101])
    def test_out_of_range(self, step):
        with pytest.raises(RangeError):
            lr_at(LrSchedule(1.0, 10, 100), step)

    def test_warmup_exceeds_total(self):
        with pytest.raises(RangeError):
            LrSchedule(1.0, 11, 10)

    @given(st.integers(0, 50), st.integers(0, 200), st.floats(1e-6, 1.0))
    def test_bounded_by_peak(self, warm, extra, peak):
        s = LrSchedule(peak, warm, warm + extra)
        rates = [lr_at(s, k) for k in range(warm + extra + 1)]
        assert all(0.0 <= r <= peak * (1 + 1e-12) for r in rates)
        assert rates[-1] == 0.0


class TestAdam:
    def test_first_step_moves_by_rate_times_sign(self):
        # bias correction makes the first update exactly rate * g / (|g| + eps)
        p = pv(w=[1.0, -2.0, 0.5])
        g = pv(w=[0.3, -4.0, 1e-3])
        new, state = adam_step(AdamState.fresh(p), p, g, 0.1)
        expected = p["w"] - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
        np.testing.assert_allclose(new["w"], expected, rtol=1e-12)
        assert state.step == 1

    def test_second_step_against_hand_recurrence(self):
        p = pv(w=[1.0])
        s = AdamState.fresh(p)
        p1, s = adam_step(s, p, pv(w=[1.0]), 0.01)
        p2, s = adam_step(s, p1, pv(w=[3.0]), 0.01)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        assert p2["w"][0] == pytest.approx(p1["w"][0] - 0.01 * mhat / (math.sqrt(vhat) + 1e-8), rel=1e-14)

    def test_inputs_unchanged(self):
        p, g = pv(w=[1.0]), pv(w=[1.0])
        s = AdamState.fresh(p)
        adam_step(s, p, g, 0.1)
        assert p["w"][0] == 1.0 and s.step == 0 and s.m["w"][0] == 0.0

    def test_minimizes_quadratic(self):
        p = pv(w=[3.0, -2.0])
        s = AdamState.fresh(p)
        for _ in range(2000):
            p, s = adam_step(s, p, p.scale(2.0), 0.01)
        assert np.linalg.norm(p["w"]) < 1e-2


class TestFiniteDiff:
    def test_scalar(self):
        assert finite_diff_gradient(lambda x: x ** 3, 2.0, 1e-4) == pytest.approx(12.0, rel=1e-7)

    def test_array(self, rng):
        A = rng.normal(size=(4, 4))
        x = rng.normal(size=4)
        g = finite_diff_gradient(lambda v: v @ A @ v, x, 1e-5)
        np.testing.assert_allclose(g, (A + A.T) @ x, rtol=1e-7)

    def test_param_vector(self):
        p = pv(a=[1.0, 2.0], b=[[3.0]])
        g = finite_diff_gradient(lambda q: q.sq_norm(), p, 1e-4)
        assert isinstance(g, ParamVector)
        np.testing.assert_allclose(g.flatten(), 2 * p.flatten(), rtol=1e-9)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            finite_diff_gradient(lambda x: math.inf * x, 1.0)

    def test_relative_error_zero_vectors(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def _check_svd(m):
    U, s, V = svd_small(m)
    k = min(m.shape)
    assert U.shape == (m.shape[0], k) and V.shape == (m.shape[1], k) and s.shape == (k,)
    np.testing.assert_allclose(U @ np.diag(s) @ V.T, m, atol=1e-10 * max(1.0, np.abs(m).max()))
    np.testing.assert_allclose(U.T @ U, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(k), atol=1e-10)
    assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
    np.testing.assert_allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-10 * max(1.0, s.max(initial=0)))


class TestSvd:
    @pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (8, 8), (32, 32), (60, 7)])
    def test_against_lapack(self, rng, shape):
        _check_svd(rng.normal(size=shape))

    def test_rank_deficient(self, rng):
        m = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 6))
        _check_svd(m)
        assert svd_small(m)[1][2:].max() < 1e-12

    def test_zero_matrix(self):
        U, s, V = svd_small(np.zeros((4, 3)))
        assert np.all(s == 0)
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-12)

    def test_too_large(self):
        with pytest.raises(UnsupportedSizeError):
            svd_small(np.zeros((513, 2)))

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                      elements=st.floats(-10, 10)))
    def test_property_reconstruction(self, m):
        _check_svd(m)


@pytest.mark.parametrize("d", [1, 2, 8, 33])
def test_random_orthogonal(d):
    Q = random_orthogonal(d, np.random.default_rng(d))
    np.testing.assert_allclose(Q @ Q.T, np.eye(d), atol=1e-12)
