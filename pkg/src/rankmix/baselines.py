"""Comparison strategies: learned routers over LoRA experts or single ranks, and dense LoRA.

Router baselines compute ``softmax(top-k(x @ W_r))`` over router columns and
scale every rank of a selected column by that column's weight. A column is a
whole rank-r LoRA block (RouterLoRA) or a single rank-1 unit (RouterRank).
Both reduce to the same arithmetic once each rank knows which column owns it,
which is what ``groups`` encodes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from rankmix.errors import DimensionError
from rankmix.gate import GateMode
from rankmix.numerics import NEG_INF, as_matrix, as_vector, softmax_rows, topk_mask_rows


@dataclass
class RouterParams:
    w_r: np.ndarray  # (d_in, n_columns)
    n_frozen: int = 0  # leading columns excluded from training

    @classmethod
    def empty(cls, d_in: int) -> "RouterParams":
        return cls(np.zeros((d_in, 0)))

    @property
    def n_columns(self) -> int:
        return self.w_r.shape[1]

    def add_columns(self, n: int, freeze_existing: bool = False) -> None:
        # zero init: new columns start from a uniform mixture
        if freeze_existing:
            self.n_frozen = self.n_columns
        self.w_r = np.concatenate([self.w_r, np.zeros((self.w_r.shape[0], n))], axis=1)


@dataclass
class RouterTrace:
    activations_a: np.ndarray
    logits: np.ndarray
    topk_set: np.ndarray
    softmax_w: np.ndarray  # per router column
    final_w: np.ndarray  # per rank
    mode: GateMode

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.final_w)

    def to_record(self) -> dict:
        return {
            "mode": self.mode.value,
            "a": self.activations_a.tolist(),
            "logits": self.logits.tolist(),
            "topk": self.topk_set.tolist(),
            "softmax_w": self.softmax_w.tolist(),
            "w": self.final_w.tolist(),
        }


@dataclass
class RouterBatch:
    a: np.ndarray  # (B, r)
    logits: np.ndarray  # (B, E)
    topk_mask: np.ndarray  # (B, E)
    softmax_w: np.ndarray  # (B, E)
    final_w: np.ndarray  # (B, r)
    groups: np.ndarray  # (r,) column index of each rank
    mode: GateMode

    def __len__(self) -> int:
        return self.a.shape[0]

    def trace(self, i: int) -> RouterTrace:
        return RouterTrace(
            activations_a=self.a[i].copy(),
            logits=self.logits[i].copy(),
            topk_set=np.flatnonzero(self.topk_mask[i]),
            softmax_w=self.softmax_w[i].copy(),
            final_w=self.final_w[i].copy(),
            mode=self.mode,
        )


def groups_for(mode: GateMode, task_ids: np.ndarray) -> np.ndarray:
    if mode is GateMode.ROUTER_RANK:
        return np.arange(task_ids.size)
    # one column per task-owned block, in task order
    _, inverse = np.unique(task_ids, return_inverse=True)
    return inverse.astype(np.int64)


def router_rows(keys, values, groups, w_r, xs, k: int, mode: GateMode):
    """Adapter contribution ``(B, d_out)`` and the cache needed by the backward pass."""
    if w_r.shape[1] != int(groups.max()) + 1:
        raise DimensionError(f"router has {w_r.shape[1]} columns but ranks reference {int(groups.max()) + 1}")
    a = xs @ keys.T
    logits = xs @ w_r
    topk = topk_mask_rows(logits, k)
    sw = softmax_rows(np.where(topk, logits, NEG_INF))
    final = sw[:, groups]
    cache = RouterBatch(a=a, logits=logits, topk_mask=topk, softmax_w=sw, final_w=final, groups=groups, mode=mode)
    return (final * a) @ values, cache


def router_rows_backward(keys, values, w_r, xs, cache: RouterBatch, dys):
    """Gradients summed over the batch: ``(d_keys, d_values, d_w_r, d_xs)`` without the base path."""
    g = dys @ values.T
    a, final, sw = cache.a, cache.final_w, cache.softmax_w
    d_values = (final * a).T @ dys
    d_a = final * g
    # each router column collects the weight gradient of every rank it scales
    onehot = np.zeros((cache.groups.size, w_r.shape[1]))
    onehot[np.arange(cache.groups.size), cache.groups] = 1.0
    d_sw = (a * g) @ onehot
    d_logits = sw * (d_sw - np.sum(sw * d_sw, axis=1, keepdims=True))
    d_w_r = xs.T @ d_logits
    d_keys = d_a.T @ xs
    d_xs = d_a @ keys + d_logits @ w_r.T
    return d_keys, d_values, d_w_r, d_xs


def moe_lora_forward(experts, router: RouterParams, x, k: int, w0=None):
    """Route ``x`` over whole LoRA experts ``[(A, B), ...]`` with A (r, d_in) and B (d_out, r).

    Returns ``(y, weights)`` with one weight per expert, zero for unselected ones.
    """
    x = as_vector(x, "x")
    keys, values, task_ids = [], [], []
    for e, (A, B) in enumerate(experts):
        A = as_matrix(A, "A")
        B = as_matrix(B, "B")
        if A.shape[1] != x.shape[0]:
            raise DimensionError(f"expert {e}: A has {A.shape[1]} cols but x has length {x.shape[0]}")
        if B.shape[1] != A.shape[0]:
            raise DimensionError(f"expert {e}: B has {B.shape[1]} cols but A has {A.shape[0]} rows")
        keys.append(A)
        values.append(B.T)
        task_ids.append(np.full(A.shape[0], e))
    keys = np.concatenate(keys)
    values = np.concatenate(values)
    groups = groups_for(GateMode.ROUTER_LORA, np.concatenate(task_ids))
    if router.w_r.shape[0] != x.shape[0]:
        raise DimensionError(f"router expects inputs of length {router.w_r.shape[0]}, got {x.shape[0]}")
    delta, cache = router_rows(keys, values, groups, router.w_r, x[None, :], k, GateMode.ROUTER_LORA)
    base = np.zeros(values.shape[1]) if w0 is None else as_matrix(w0, "w0") @ x
    return base + delta[0], cache.softmax_w[0]


def rank_router_forward(pool, router: RouterParams, x, k: int, w0=None):
    """Route ``x`` over the individual rank-1 units of ``pool``; one router column per unit."""
    x = as_vector(x, "x")
    if pool.d_in != x.shape[0] or router.w_r.shape[0] != x.shape[0]:
        raise DimensionError(f"pool/router expect inputs of length {pool.d_in}, got {x.shape[0]}")
    groups = groups_for(GateMode.ROUTER_RANK, pool.task_ids)
    delta, cache = router_rows(pool.keys, pool.values, groups, router.w_r, x[None, :], k, GateMode.ROUTER_RANK)
    base = np.zeros(pool.d_out) if w0 is None else as_matrix(w0, "w0") @ x
    return base + delta[0], cache.softmax_w[0]


class DenseVariant(str, enum.Enum):
    SEQ_LORA = "SeqLoRA"
    INC_LORA = "IncLoRA"


@dataclass(frozen=True)
class BaselineSetup:
    mode: GateMode
    # False: one pool created on the first task, never frozen, reused by every task
    grow_per_task: bool


def dense_baseline_mode(variant) -> BaselineSetup:
    variant = DenseVariant(variant)
    if variant is DenseVariant.SEQ_LORA:
        return BaselineSetup(mode=GateMode.DENSE, grow_per_task=False)
    return BaselineSetup(mode=GateMode.DENSE, grow_per_task=True)
