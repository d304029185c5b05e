import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xalign.errors import ConfigError, ShapeError
from xalign.numerics import ParamVector, finite_diff_gradient, random_orthogonal, relative_error
from xalign.objectives import (AlignedStateBatch, MappingMatrix, ObjectiveConfig, SimilarityHead, combined_l2,
                               head_widths, l2_loss, linear_map_loss, orthogonality_update, procrustes_svd,
                               reg_hidden, reg_param, sim, strong_from_sims, strong_loss, weak_from_sims,
                               weak_loss)


def test_l2_loss_hand_value():
    b = AlignedStateBatch([[1.0, 0.0], [0.0, 2.0]], [[0.0, 0.0], [0.0, 0.0]])
    loss, gS, gT = l2_loss(b)
    assert loss == pytest.approx((1.0 + 4.0) / 2)
    np.testing.assert_allclose(gS, [[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(gT, -gS)


def test_batch_shape_mismatch():
    with pytest.raises(ShapeError):
        AlignedStateBatch(np.zeros((2, 3)), np.zeros((2, 4)))


def test_reg_param_and_hidden_values():
    theta = ParamVector({"a": [1.0, 2.0], "b": [[3.0]]})
    pre = ParamVector({"a": [1.0, 0.0], "b": [[1.0]]})
    r, g = reg_param(theta, pre)
    assert r == 8.0
    np.testing.assert_allclose(g.flatten(), [0.0, 4.0, 4.0])
    r, g = reg_hidden([[1.0, 1.0]], [[0.0, 3.0]])
    assert r == 5.0
    np.testing.assert_allclose(g, [[2.0, -4.0]])


def test_reg_param_structure_mismatch():
    with pytest.raises(ShapeError):
        reg_param(ParamVector({"a": [1.0]}), ParamVector({"b": [1.0]}))


def test_combined_l2_lambda_zero_equals_l2(rng):
    b = AlignedStateBatch(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    theta = ParamVector({"w": rng.normal(size=4)})
    loss, _ = combined_l2(b, theta, theta.zeros_like(), lam=0.0)
    assert loss == l2_loss(b)[0]


def test_combined_l2_requires_inputs(rng):
    b = AlignedStateBatch(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    with pytest.raises(ConfigError):
        combined_l2(b)
    with pytest.raises(ConfigError):
        combined_l2(b, regularizer="hidden")


def test_linear_map_loss_value(rng):
    S, T, W = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(3, 3))
    loss, _ = linear_map_loss(S, T, W)
    assert loss == pytest.approx(np.linalg.norm(S - T @ W) ** 2, rel=1e-12)
    assert linear_map_loss(S, T, MappingMatrix(W))[0] == loss


def test_orthogonality_update_scalar_oracle():
    # on c*Q the update acts on the scalar alone: c -> (1+b)c - b c^3
    Q = random_orthogonal(5, np.random.default_rng(0))
    c, W = 0.7, 0.7 * Q
    for _ in range(50):
        W = orthogonality_update(W, 0.01)
        c = 1.01 * c - 0.01 * c ** 3
    np.testing.assert_allclose(W, c * Q, atol=1e-13)


def test_orthogonality_update_square_only():
    with pytest.raises(ShapeError):
        orthogonality_update(np.zeros((2, 3)))


@pytest.mark.parametrize("d", [2, 8, 16])
def test_procrustes_recovers_rotation(d, rng):
    S = rng.normal(size=(100, d))
    Q = random_orthogonal(d, rng)
    m = procrustes_svd(S, S @ Q.T)
    assert np.linalg.norm(m.W - Q) < 1e-10
    assert not m.degenerate


def test_procrustes_beats_random_orthogonal(rng):
    S, T = rng.normal(size=(40, 4)), rng.normal(size=(40, 4))
    best = linear_map_loss(S, T, procrustes_svd(S, T).W)[0]
    for _ in range(50):
        assert best <= linear_map_loss(S, T, random_orthogonal(4, rng))[0] + 1e-9


def test_procrustes_degenerate_still_orthogonal():
    S = np.zeros((5, 3))
    m = procrustes_svd(S, np.ones((5, 3)))
    assert m.degenerate
    np.testing.assert_allclose(m.W @ m.W.T, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("d, widths", [(768, (768, 768, 128)), (32, (32, 32, 6)), (6, (6, 6, 1))])
def test_head_widths(d, widths):
    assert head_widths(d) == widths
    assert SimilarityHead.init(d).widths == widths


def test_identity_head_is_shifted_truncation(rng):
    x = rng.uniform(-0.9, 0.9, size=(4, 12))
    np.testing.assert_allclose(SimilarityHead.init(12).forward(x), (x + 1.0)[:, :2])


def test_sim_symmetric_and_bounded(rng):
    head = SimilarityHead.init(8, seed=1, identity=False)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert sim(a, b, head) == pytest.approx(sim(b, a, head))
    assert -1 - 1e-12 <= sim(a, b, head) <= 1 + 1e-12
    assert sim(a, a, head) == pytest.approx(1.0)


def test_weak_from_sims_two_by_two():
    # each of the four softmax terms is -log(e / (e + 1)) at tau = 1
    loss, _ = weak_from_sims(np.eye(2), 1.0)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-14)


def test_strong_from_sims_two_pairs():
    # rows compare a positive at sim 1 against two negatives at sim 0
    sims = np.zeros((4, 4))
    for i in range(2):
        sims[i, i + 2] = sims[i + 2, i] = 1.0
    loss, g = strong_from_sims(sims, 1.0)
    assert loss == pytest.approx(math.log(1 + 2 * math.exp(-1)), rel=1e-14)
    assert np.all(np.diag(g) == 0)


@pytest.mark.parametrize("fn", [weak_from_sims, strong_from_sims])
def test_sims_gradient(fn, rng):
    n = 6 if fn is strong_from_sims else 3
    S = rng.normal(size=(n, n))
    _, g = fn(S, 0.3)
    fd = finite_diff_gradient(lambda x: fn(x, 0.3)[0], S, 1e-6)
    if fn is strong_from_sims:
        np.fill_diagonal(fd, 0.0)
    assert relative_error(g, fd) < 1e-7


@pytest.mark.parametrize("fn, bad", [
    (weak_from_sims, np.zeros((1, 1))),
    (strong_from_sims, np.zeros((3, 3))),
    (strong_from_sims, np.zeros((2, 2))),
])
def test_contrastive_batch_too_small(fn, bad):
    with pytest.raises(ConfigError):
        fn(bad, 0.1)


def test_contrastive_tau_must_be_positive(rng):
    b = AlignedStateBatch(rng.normal(size=(2, 12)), rng.normal(size=(2, 12)))
    with pytest.raises(ConfigError):
        weak_loss(b, SimilarityHead.init(12), tau=0.0)


def test_contrastive_head_width_mismatch(rng):
    b = AlignedStateBatch(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)))
    with pytest.raises(ShapeError):
        strong_loss(b, SimilarityHead.init(12))


@given(st.integers(2, 12), st.floats(0.05, 5.0))
def test_uniform_similarity_values(B, tau):
    assert weak_from_sims(np.full((B, B), 0.3), tau)[0] == pytest.approx(math.log(B), abs=1e-12)
    assert strong_from_sims(np.full((2 * B, 2 * B), 0.3), tau)[0] == pytest.approx(math.log(2 * B - 1), abs=1e-12)


def test_perfectly_separated_batch_has_low_loss():
    # orthogonal, perfectly matched rows: loss shrinks toward 0 as tau -> 0
    X = np.eye(12)[:4] + 0.0
    b = AlignedStateBatch(X, X)
    head = SimilarityHead.create(np.eye(12), np.zeros(12), np.eye(12), np.zeros(12))
    assert weak_loss(b, head, 0.01)[0] < 1e-30
    assert strong_loss(b, head, 0.01)[0] < 1e-30


def test_objective_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(tau=0)
    with pytest.raises(ConfigError):
        ObjectiveConfig(mode="fancy")
