import numpy as np
import pytest

from rankmix.adapter import AdaptedLinear, RankPool
from rankmix.baselines import (
    DenseVariant,
    RouterParams,
    dense_baseline_mode,
    groups_for,
    moe_lora_forward,
    rank_router_forward,
)
from rankmix.errors import DimensionError
from rankmix.gate import GateConfig, GateMode, gate_pipeline


def test_single_expert_gets_weight_one():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 4)), rng.normal(size=(3, 2))
    w0, x = rng.normal(size=(3, 4)), rng.normal(size=4)
    y, w = moe_lora_forward([(A, B)], RouterParams(rng.normal(size=(4, 1))), x, k=1, w0=w0)
    assert w.tolist() == [1.0]
    np.testing.assert_allclose(y, w0 @ x + B @ (A @ x), rtol=0, atol=1e-12)


def test_equal_logits_split_evenly():
    rng = np.random.default_rng(1)
    experts = [(rng.normal(size=(2, 4)), rng.normal(size=(3, 2))) for _ in range(2)]
    _, w = moe_lora_forward(experts, RouterParams(np.zeros((4, 2))), rng.normal(size=4), k=2)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_router_topk_keeps_k_experts():
    rng = np.random.default_rng(2)
    experts = [(rng.normal(size=(2, 5)), rng.normal(size=(3, 2))) for _ in range(4)]
    _, w = moe_lora_forward(experts, RouterParams(rng.normal(size=(5, 4))), rng.normal(size=5), k=2)
    assert np.count_nonzero(w) == 2
    assert abs(w.sum() - 1) < 1e-9


def test_moe_dimension_errors():
    A, B = np.ones((2, 4)), np.ones((3, 2))
    with pytest.raises(DimensionError):
        moe_lora_forward([(A, B)], RouterParams(np.zeros((4, 1))), np.ones(5), k=1)
    with pytest.raises(DimensionError):
        moe_lora_forward([(A, np.ones((3, 3)))], RouterParams(np.zeros((4, 1))), np.ones(4), k=1)


def test_rank_router_matches_layer_forward():
    rng = np.random.default_rng(3)
    layer = AdaptedLinear(rng.normal(size=(3, 6)), GateConfig(mode=GateMode.ROUTER_RANK, budget_k=4), 3)
    layer.grow(3, 1, 0)
    layer.grow(3, 2, 1)
    layer.pool.values[:] = rng.normal(size=layer.pool.values.shape)
    layer.router.w_r[:] = rng.normal(size=layer.router.w_r.shape)
    x = rng.normal(size=6)
    y, w = rank_router_forward(layer.pool, layer.router, x, 4, w0=layer.w0)
    y2, _ = layer.forward_rows(x[None, :])
    np.testing.assert_array_equal(y, y2[0])
    assert np.count_nonzero(w) == 4


def test_rank_router_and_self_gate_share_budget():
    rng = np.random.default_rng(4)
    pool = RankPool(6, 3, 8).grow(8, 1, 0)
    x = rng.normal(size=6)
    _, w = rank_router_forward(pool, RouterParams(rng.normal(size=(6, 8))), x, 3)
    tr = gate_pipeline(pool.keys, x, GateConfig(budget_k=3, mode=GateMode.SELF_SPARSE))
    assert np.count_nonzero(w) == tr.support.size == 3


def test_groups():
    ids = np.array([1, 1, 2, 2, 4])
    assert groups_for(GateMode.ROUTER_LORA, ids).tolist() == [0, 0, 1, 1, 2]
    assert groups_for(GateMode.ROUTER_RANK, ids).tolist() == [0, 1, 2, 3, 4]


def test_router_columns_grow_with_tasks():
    lora = AdaptedLinear(np.zeros((2, 3)), GateConfig(mode=GateMode.ROUTER_LORA), 4)
    rank = AdaptedLinear(np.zeros((2, 3)), GateConfig(mode=GateMode.ROUTER_RANK), 4)
    for t in (1, 2):
        lora.grow(4, t, t)
        rank.grow(4, t, t)
    assert lora.router.n_columns == 2 and rank.router.n_columns == 8
    assert np.all(lora.router.w_r == 0)


def test_router_freeze_option():
    layer = AdaptedLinear(np.zeros((2, 3)), GateConfig(mode=GateMode.ROUTER_LORA, router_freeze_old=True), 4)
    layer.grow(4, 1, 0)
    assert layer.router.n_frozen == 0
    layer.grow(4, 2, 1)
    assert layer.router.n_frozen == 1


def test_dense_variants():
    assert dense_baseline_mode(DenseVariant.SEQ_LORA).grow_per_task is False
    assert dense_baseline_mode("IncLoRA").grow_per_task is True
    assert dense_baseline_mode("SeqLoRA").mode is GateMode.DENSE
