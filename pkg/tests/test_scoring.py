import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phiaqa import diffcore as dc
from phiaqa import scoring
from phiaqa.errors import ShapeError


def head(rng, D=4):
    store = dc.ParamStore()
    scoring.init_head(store, D, rng)
    return store, scoring.HeadParams.from_store(store)


def test_pool_examples(rng):
    v = rng.normal(size=3)
    np.testing.assert_array_equal(scoring.pool_clips(np.tile(v, (4, 1))).data, v)
    np.testing.assert_array_equal(scoring.pool_clips(np.array([[0.0], [2.0]])).data, [1.0])


def test_zero_weights_return_bias(rng):
    h = scoring.HeadParams(np.zeros((4, 2)), np.zeros(2), np.zeros((2, 1)), np.array([0.7]))
    assert scoring.predict_score(rng.normal(size=(5, 4)), h).item() == 0.7


def test_prediction_matches_direct_evaluation(rng):
    _, h = head(rng)
    H = rng.normal(size=(6, 4))
    v = H.mean(0)
    expected = np.maximum(v @ h.w1.data + h.b1.data, 0) @ h.w2.data + h.b2.data
    assert scoring.predict_score(H, h).item() == pytest.approx(expected[0], rel=1e-14)


def test_batched_prediction_matches_per_sample(rng):
    _, h = head(rng)
    X = rng.normal(size=(3, 5, 4))
    batch = scoring.predict_score(X, h).data
    assert batch.shape == (3,)
    for b in range(3):
        assert batch[b] == pytest.approx(scoring.predict_score(X[b], h).item(), rel=1e-14)


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_prediction_ignores_clip_order(M, seed):
    rng = np.random.default_rng(seed)
    _, h = head(rng)
    H = rng.normal(size=(M, 4))
    a = scoring.predict_score(H, h).item()
    b = scoring.predict_score(H[rng.permutation(M)], h).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_head_width_is_half_the_input(rng):
    store, _ = head(rng, D=8)
    assert store["head.w1"].shape == (8, 4)
    assert store["head.w2"].shape == (4, 1)


def test_score_loss_examples(rng):
    t = rng.normal(size=5)
    assert scoring.score_loss(t, t).item() == 0.0
    assert scoring.score_loss(np.array([0.0]), np.array([2.0])).item() == 2.0
    p = rng.normal(size=5)
    assert scoring.score_loss(p, t).item() == pytest.approx(0.5 * sum((a - b) ** 2 for a, b in zip(p, t)))
    assert scoring.score_loss(p, t, mean=True).item() == pytest.approx(0.5 * np.mean((p - t) ** 2))


def test_score_loss_length_mismatch():
    with pytest.raises(ShapeError):
        scoring.score_loss(np.zeros(3), np.zeros(4))


def test_total_loss_examples():
    assert scoring.total_loss(0.0, 0.0, 0.0) == 0.0
    assert scoring.total_loss(1.0, 2.0, 3.0) == pytest.approx(2.03, abs=1e-15)
    assert scoring.total_loss(1.5, 9.0, 9.0, lambda_m=0.0, lambda_r=0.0) == 1.5


def test_head_gradient(rng):
    store, _ = head(rng)
    X = rng.normal(size=(3, 4, 4))
    t = rng.uniform(size=3)

    def loss(p):
        return scoring.score_loss(scoring.predict_score(X, scoring.HeadParams.from_store(p)), t)

    _, analytic = dc.gradient_of(loss, store)
    assert dc.max_relative_error(analytic, dc.finite_diff_grad(loss, store)) < 1e-6
