import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankmix.errors import AllMasked, DimensionError, InvalidBudget
from rankmix.numerics import NEG_INF, matvec, softmax_rows, stable_softmax, topk_indices, topk_mask_rows

finite = st.floats(-50, 50, allow_nan=False)


def test_matvec_matches_numpy():
    rng = np.random.default_rng(0)
    m, x = rng.normal(size=(3, 4)), rng.normal(size=4)
    np.testing.assert_allclose(matvec(m, x), m @ x, rtol=0, atol=1e-15)


def test_matvec_shape_mismatch():
    with pytest.raises(DimensionError):
        matvec(np.ones((2, 3)), np.ones(4))


def test_softmax_large_logits_do_not_overflow():
    w = stable_softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_softmax_masked_entries_are_exact_zeros():
    w = stable_softmax(np.array([0.3, NEG_INF, 1.2]))
    assert w[1] == 0.0
    assert abs(w.sum() - 1) < 1e-12


def test_softmax_all_masked_raises():
    with pytest.raises(AllMasked):
        stable_softmax(np.array([NEG_INF, NEG_INF]))


@pytest.mark.parametrize(
    "v, k, expected",
    [([0.9, 0.1, 0.4], 2, [0, 2]), ([0.5, 0.5, 0.1], 1, [0]), ([0.2, 0.7], 5, [0, 1])],
)
def test_topk_examples(v, k, expected):
    assert topk_indices(np.array(v), k).tolist() == expected


def test_topk_rejects_zero_budget():
    with pytest.raises(InvalidBudget):
        topk_mask_rows(np.zeros((1, 3)), 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.integers(1, 40))
def test_topk_size_and_dominance(v, k):
    mask = topk_mask_rows(v[None, :], k)[0]
    assert mask.sum() == min(k, v.size)
    if mask.sum() < v.size:
        assert v[mask].min() >= v[~mask].max()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_softmax_is_a_distribution(z):
    w = softmax_rows(z[None, :])[0]
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-12
    # order preserving
    assert np.all(np.diff(w[np.argsort(z, kind="stable")]) >= -1e-15)
