import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_coverage
from rankmix.analysis import (
    activation_profile,
    coverage_count,
    coverage_of,
    gate_entropy,
    parameter_report,
    reuse_matrix,
)
from rankmix.errors import ConfigError, DimensionError
from rankmix.gate import GateConfig, GateMode
from rankmix.taskgen import make_stream
from rankmix.trainer import build_model, init_weights


def grown_model(mode=GateMode.SELF_SPARSE, tasks=2, r=8, seed=0, **gate):
    model = build_model(init_weights([32, 16, 20], seed), GateConfig(mode=mode, **gate), r)
    for t in range(1, tasks + 1):
        model.grow(r, t, seed)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        layer.pool.values[:] = 0.1 * rng.normal(size=layer.pool.values.shape)
    return model


def inputs(n=200, seed=1):
    return np.random.default_rng(seed).normal(size=(n, 32))


def test_dense_frequencies_are_one():
    prof = activation_profile(grown_model(GateMode.DENSE), inputs())
    for lp in prof.layers:
        assert np.all(lp.frequency == 1.0) and np.all(lp.mean_abs_w == 1.0)
        assert coverage_of(lp.mean_abs_w) == lp.mean_abs_w.size


def test_frequencies_respect_budget():
    k = 3
    prof = activation_profile(grown_model(budget_k=k), inputs())
    for lp in prof.layers:
        assert lp.frequency.sum() <= k + 1e-12
        assert np.all((lp.frequency >= 0) & (lp.frequency <= 1))


def test_single_rank_fires_always():
    model = build_model(init_weights([32, 20], 0), GateConfig(mode=GateMode.SELF_ADAPTIVE, delta=0.0), 1)
    model.grow(1, 1, 0)
    xs = inputs()
    # a one-rank score is +-1; flip inputs so every score is positive
    keys = model.layers[0].pool.keys[0]
    xs = xs * np.sign(xs @ keys)[:, None]
    lp = activation_profile(model, xs).layers[0]
    assert lp.frequency.tolist() == [1.0]
    assert abs(lp.mean_abs_w[0] - 1.0) < 1e-12


def test_profile_input_forms_agree():
    model = grown_model()
    xs = inputs()
    a = activation_profile(model, xs)
    b = activation_profile(model, (xs, np.zeros(len(xs), dtype=int)))
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.mean_abs_w, lb.mean_abs_w)
    assert a.layer("head").n_inputs == 200


def test_profile_errors():
    model = grown_model()
    with pytest.raises(ConfigError):
        activation_profile(model, np.zeros((0, 32)))
    with pytest.raises(DimensionError):
        activation_profile(model, np.zeros((4, 5)))
    empty = build_model(init_weights([32, 20], 0), GateConfig(), 4)
    with pytest.raises(ConfigError):
        activation_profile(empty, inputs())


def test_profile_leaves_model_untouched():
    model = grown_model()
    before = [(l.pool.keys.tobytes(), l.pool.values.tobytes(), l.w0.tobytes()) for l in model.layers]
    activation_profile(model, inputs())
    reuse_matrix(model, make_stream(seed=0, T=2))
    after = [(l.pool.keys.tobytes(), l.pool.values.tobytes(), l.w0.tobytes()) for l in model.layers]
    assert before == after


@pytest.mark.parametrize("r,f", [(16, 0.99), (16, 0.5), (10, 0.25), (7, 1.0)])
def test_uniform_coverage(r, f):
    assert coverage_of(np.full(r, 0.3), f) == math.ceil(f * r)


def test_dominant_rank_coverage():
    assert coverage_of(np.array([1.0, 0, 0, 0]), 0.99) == 1


def test_coverage_edge_cases():
    assert coverage_of(np.zeros(5)) == 0
    assert coverage_of(np.array([0.5, 0.0, 0.2, 0.0]), 1.0) == 2
    with pytest.raises(ConfigError):
        coverage_of(np.ones(3), 0.0)


def test_coverage_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        r = int(rng.integers(1, 40))
        w = rng.exponential(size=r) * (rng.uniform(size=r) < 0.7)
        f = float(rng.choice([0.5, 0.9, 0.99, 1.0]))
        assert coverage_of(w, f) == naive_coverage(w, f)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_coverage_property(w, f):
    c = coverage_of(np.array(w), f)
    assert c == naive_coverage(w, f)
    assert 0 <= c <= len(w)


def test_coverage_count_keys():
    model = grown_model()
    counts = coverage_count(activation_profile(model, inputs()))
    assert set(counts) == {l.name for l in model.adapted_layers}


def test_reuse_rows_sum_to_one():
    stream = make_stream(seed=0, T=3)
    m = reuse_matrix(grown_model(tasks=3), stream)
    assert m.shape == (3, 3)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(m >= 0)


def test_reuse_single_task():
    m = reuse_matrix(grown_model(tasks=1), make_stream(seed=0, T=1))
    assert m.tolist() == [[1.0]]


def test_reuse_after_first_task_only():
    m = reuse_matrix(grown_model(tasks=1), make_stream(seed=0, T=3))
    np.testing.assert_allclose(m[:, 0], 1.0)
    assert np.all(m[:, 1:] == 0)


def test_reuse_without_shift_shares_ranks():
    m = reuse_matrix(grown_model(tasks=2), make_stream(seed=0, T=2, shift_strength=0.0))
    assert m[1, 0] > 0


def test_reuse_pruned_rows_stay_zero():
    # delta above every possible score prunes everything
    m = reuse_matrix(grown_model(GateMode.SELF_ADAPTIVE, delta=1.5), make_stream(seed=0, T=2))
    assert np.all(m == 0)


def test_reuse_single_layer():
    model = grown_model()
    m = reuse_matrix(model, make_stream(seed=0, T=2), layer="fc1")
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    with pytest.raises(KeyError):
        reuse_matrix(model, make_stream(seed=0, T=2), layer="nope")


@pytest.mark.parametrize("n", [1, 2, 5, 16])
def test_entropy_of_uniform_weights(n):
    assert abs(gate_entropy(SimpleNamespace(final_w=np.full(n, 1.0 / n))) - math.log(n)) < 1e-12


def test_entropy_closed_forms():
    assert gate_entropy(SimpleNamespace(final_w=np.zeros(4))) == 0.0
    p = 0.2
    h = gate_entropy(SimpleNamespace(final_w=np.array([p, 1 - p, 0.0])))
    assert abs(h - (-p * math.log(p) - (1 - p) * math.log(1 - p))) < 1e-12
    # unnormalized (pruned) weights are renormalized first
    assert abs(gate_entropy(SimpleNamespace(final_w=np.array([0.3, 0.3]))) - math.log(2)) < 1e-12


def test_parameter_report():
    rows = parameter_report(grown_model(r=8, budget_k=4))
    fc1 = rows[0]
    assert fc1["added_per_task"] == 8 * (32 + 16)
    assert fc1["activated_per_input"] == 8 * 32 + 4 * 16
