import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phiaqa import diffcore as dc
from phiaqa import lcr
from phiaqa.errors import ShapeError

F_I = np.array([[0.0], [2.0]])
F_J = np.array([[1.0], [5.0]])


def brute_distance(a, b):
    total = 0.0
    for m in range(len(a)):
        total += min(float(((a[m] - b[n]) ** 2).sum()) for n in range(len(b)))
    return total


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def brute_lcr(D, S, rescale=True):
    B = len(D)
    off = ~np.eye(B, dtype=bool)
    if rescale:
        D = D / D[off].mean()
        S = S / S[off].mean()
    total = 0.0
    for i in range(B):
        p = softmax(np.delete(D[i], i))
        q = softmax(np.delete(S[i], i))
        total += (q * np.log(q / p)).sum() + (p * np.log(p / q)).sum()
    return total


# ---------------------------------------------------------------- distances


def test_action_distance_examples(rng):
    F = rng.normal(size=(3, 2))
    assert lcr.action_distance(F, F) == 0.0
    a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert lcr.action_distance(a, b) == pytest.approx(((a - b) ** 2).sum(), rel=1e-14)
    assert lcr.action_distance(F_I, F_J) == 2.0
    assert lcr.action_distance(F_J, F_I) == 10.0


def test_action_distance_shape_mismatch():
    with pytest.raises(ShapeError):
        lcr.action_distance(np.zeros((2, 1)), np.zeros((3, 1)))


def test_distance_matrix_examples(rng):
    np.testing.assert_array_equal(lcr.distance_matrix([F_I, F_J]).data, [[0, 2], [10, 0]])
    same = np.tile(rng.normal(size=(1, 3, 2)), (3, 1, 1))
    np.testing.assert_array_equal(lcr.distance_matrix(same).data, np.zeros((3, 3)))


@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_distance_matrix_matches_double_loop(B, M, seed):
    X = np.random.default_rng(seed).normal(size=(B, M, 3))
    D = lcr.distance_matrix(X).data
    expected = np.array([[brute_distance(X[i], X[j]) for j in range(B)] for i in range(B)])
    np.testing.assert_allclose(D, expected, rtol=1e-12, atol=1e-12)
    assert np.all(np.diag(D) == 0.0) and np.all(D >= 0.0)


def test_distance_matrix_needs_two_samples():
    with pytest.raises(ShapeError):
        lcr.distance_matrix(np.zeros((1, 2, 2)))


def test_score_distance_matrix_examples():
    np.testing.assert_array_equal(lcr.score_distance_matrix([1, 3]).data, [[0, 2], [2, 0]])
    np.testing.assert_array_equal(lcr.score_distance_matrix([4, 4, 4]).data, np.zeros((3, 3)))
    S = lcr.score_distance_matrix([8.40, 8.64, 9.10]).data
    np.testing.assert_allclose(S, [[0, 0.24, 0.70], [0.24, 0, 0.46], [0.70, 0.46, 0]], atol=1e-12)
    np.testing.assert_array_equal(S, S.T)


def test_ordering_consistency_of_identical_sequences(rng):
    F = rng.normal(size=(5, 3))
    assert lcr.ordering_consistency(F, F) == 1.0


# ---------------------------------------------------------------- distributions


def test_row_to_distribution_examples():
    np.testing.assert_allclose(lcr.row_to_distribution([0, 7, 7, 7], 0), np.full(3, 1 / 3))
    np.testing.assert_allclose(lcr.row_to_distribution([math.log(1), 0.0, math.log(3)], 1), [0.25, 0.75])
    row = np.array([0.3, 0.0, -1.2, 2.0])
    np.testing.assert_allclose(lcr.row_to_distribution(row + 5.0, 1), lcr.row_to_distribution(row, 1),
                               rtol=1e-14)
    with pytest.raises(ShapeError):
        lcr.row_to_distribution([0.0], 0)


# ---------------------------------------------------------------- loss


def test_lcr_zero_when_rows_coincide(rng):
    S = lcr.score_distance_matrix(rng.normal(size=4))
    assert lcr.lcr_loss(S, S).item() == 0.0


def test_lcr_is_vacuous_for_two_samples(rng):
    D = lcr.distance_matrix(rng.normal(size=(2, 3, 2)))
    assert lcr.lcr_loss(D, lcr.score_distance_matrix([0.0, 5.0])).item() == 0.0


@pytest.mark.parametrize("rescale", [True, False])
def test_lcr_matches_independent_kl_sums(rng, rescale):
    X = rng.normal(size=(4, 3, 2))
    s = rng.uniform(size=4)
    D = lcr.distance_matrix(X)
    S = lcr.score_distance_matrix(s)
    expected = brute_lcr(D.data, S.data, rescale)
    assert lcr.lcr_loss(D, S, rescale=rescale).item() == pytest.approx(expected, rel=1e-10)


@given(st.integers(3, 6), st.integers(0, 10_000))
def test_lcr_nonnegative_and_symmetric(B, seed):
    rng = np.random.default_rng(seed)
    D = lcr.distance_matrix(rng.normal(size=(B, 3, 2)))
    S = lcr.score_distance_matrix(rng.uniform(size=B))
    a = lcr.lcr_loss(D, S).item()
    b = lcr.lcr_loss(S, D).item()
    assert a >= 0.0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_lcr_sum_normalization_mode(rng):
    D = lcr.distance_matrix(rng.normal(size=(4, 3, 2)))
    S = lcr.score_distance_matrix(rng.uniform(size=4))
    assert lcr.lcr_loss(D, S, normalize="sum").item() > 0.0
    assert lcr.lcr_loss(S, S, normalize="sum").item() == 0.0


def test_lcr_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        lcr.lcr_loss(np.zeros((3, 3)), np.zeros((4, 4)))


@pytest.mark.parametrize("seed", range(4))
def test_lcr_gradient_through_min_selection(seed):
    rng = np.random.default_rng(seed)
    store = dc.ParamStore({"x": rng.normal(size=(4, 3, 2))})
    S = lcr.score_distance_matrix(rng.uniform(size=4))

    def loss(p):
        return lcr.lcr_loss(lcr.distance_matrix(p["x"]), S)

    _, analytic = dc.gradient_of(loss, store)
    numeric = dc.finite_diff_grad(loss, store)
    assert dc.max_relative_error(analytic, numeric) < 1e-6
