"""Linear layer with a frozen base weight and a growing pool of gated rank-1 units.

    y = W0 x + sum_i w_i (A_i . x) B_i

``A_i`` (the key) and ``B_i`` (the value) of every unit live as rows of two
contiguous matrices inside :class:`RankPool`; :class:`RankUnit` objects are
views onto those rows. Frozen units always form a prefix of the pool, so the
trainable parameters are plain slices that an optimizer can update in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rankmix.baselines import RouterBatch, RouterParams, groups_for, router_rows, router_rows_backward
from rankmix.errors import DimensionError, NonMonotonicTask, TraceMismatch
from rankmix.gate import GateBatch, GateConfig, GateMode, GateTrace, gate_rows
from rankmix.numerics import as_matrix, as_vector


@dataclass
class RankUnit:
    key_a: np.ndarray
    value_b: np.ndarray
    task_id: int
    frozen: bool


class RankPool:
    def __init__(self, d_in: int, d_out: int, r_per_task: int):
        self.d_in = d_in
        self.d_out = d_out
        self.r_per_task = r_per_task
        self.keys = np.zeros((0, d_in))
        self.values = np.zeros((0, d_out))
        self.task_ids = np.zeros(0, dtype=np.int64)
        self.frozen = np.zeros(0, dtype=bool)

    @property
    def r_t(self) -> int:
        return self.keys.shape[0]

    @property
    def n_frozen(self) -> int:
        return int(self.frozen.sum())

    @property
    def units(self) -> list[RankUnit]:
        return [
            RankUnit(self.keys[i], self.values[i], int(self.task_ids[i]), bool(self.frozen[i]))
            for i in range(self.r_t)
        ]

    def trainable_slice(self) -> slice:
        return slice(self.n_frozen, self.r_t)

    def check(self) -> None:
        if np.any(np.diff(self.task_ids) < 0):
            raise AssertionError("rank units are not grouped by ascending task id")
        nf = self.n_frozen
        if not self.frozen[:nf].all():
            raise AssertionError("frozen units must form a prefix of the pool")

    def grow(self, r_new: int, task_id: int, rng_seed) -> "RankPool":
        """Freeze every existing unit and append ``r_new`` fresh ones owned by ``task_id``.

        Keys are drawn from N(0, 1/d_in); values start at zero so the layer's
        function is unchanged by the growth itself.
        """
        if self.r_t and task_id <= int(self.task_ids.max()):
            raise NonMonotonicTask(f"task {task_id} is not after existing task {int(self.task_ids.max())}")
        rng = np.random.default_rng(rng_seed)
        new_keys = rng.normal(0.0, 1.0 / np.sqrt(self.d_in), size=(r_new, self.d_in))
        self.frozen[:] = True
        self.keys = np.concatenate([self.keys, new_keys])
        self.values = np.concatenate([self.values, np.zeros((r_new, self.d_out))])
        self.task_ids = np.concatenate([self.task_ids, np.full(r_new, task_id, dtype=np.int64)])
        self.frozen = np.concatenate([self.frozen, np.zeros(r_new, dtype=bool)])
        return self

    def copy(self) -> "RankPool":
        p = RankPool(self.d_in, self.d_out, self.r_per_task)
        p.keys = self.keys.copy()
        p.values = self.values.copy()
        p.task_ids = self.task_ids.copy()
        p.frozen = self.frozen.copy()
        return p


def grow(pool: RankPool, r_new: int, task_id: int, rng_seed) -> RankPool:
    return pool.grow(r_new, task_id, rng_seed)


@dataclass
class AdapterGrads:
    unit_index: np.ndarray  # pool indices of the non-frozen units the rows below refer to
    d_key_a: np.ndarray
    d_value_b: np.ndarray
    d_x: np.ndarray
    d_router: np.ndarray | None = None


class AdaptedLinear:
    def __init__(self, w0, cfg: GateConfig, r_per_task: int, name: str = ""):
        self.w0 = as_matrix(w0, "w0").copy()
        self.w0.setflags(write=False)
        self.cfg = cfg
        self.pool = RankPool(self.d_in, self.d_out, r_per_task)
        self.router = RouterParams.empty(self.d_in) if cfg.mode.is_router else None
        self.name = name

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    def grow(self, r_new: int, task_id: int, rng_seed) -> None:
        self.pool.grow(r_new, task_id, rng_seed)
        if self.router is not None:
            self.router.add_columns(r_new if self.cfg.mode is GateMode.ROUTER_RANK else 1,
                                   freeze_existing=self.cfg.router_freeze_old)

    def forward_rows(self, xs: np.ndarray):
        """Outputs for each row of ``xs`` and the gate cache for :meth:`backward_rows`."""
        if xs.ndim != 2 or xs.shape[1] != self.d_in:
            raise DimensionError(f"{self.name or 'layer'} expects inputs of length {self.d_in}, got shape {xs.shape}")
        base = xs @ self.w0.T
        pool = self.pool
        if pool.r_t == 0:
            return base, None
        if self.router is not None:
            k = self.cfg.router_k if self.cfg.mode is GateMode.ROUTER_LORA else self.cfg.budget_k
            groups = groups_for(self.cfg.mode, pool.task_ids)
            delta, cache = router_rows(pool.keys, pool.values, groups, self.router.w_r, xs, k, self.cfg.mode)
            return base + delta, cache
        cache = gate_rows(pool.keys, xs, self.cfg)
        return base + (cache.final_w * cache.a) @ pool.values, cache

    def backward_rows(self, xs: np.ndarray, cache, dys: np.ndarray) -> AdapterGrads:
        """Reverse pass for a batch; parameter gradients are summed over rows.

        Top-k and threshold masks are held constant. Frozen units get no gradient,
        but still shape the gradients of the others through the shared score norm
        and the softmax competition.
        """
        pool = self.pool
        d_xs = dys @ self.w0
        sl = pool.trainable_slice()
        idx = np.arange(pool.r_t)[sl]
        if pool.r_t == 0 or cache is None:
            return AdapterGrads(idx, np.zeros((0, self.d_in)), np.zeros((0, self.d_out)), d_xs)
        if isinstance(cache, RouterBatch):
            d_keys, d_values, d_w_r, d_x_ad = router_rows_backward(pool.keys, pool.values, self.router.w_r, xs, cache, dys)
            return AdapterGrads(idx, d_keys[sl], d_values[sl], d_xs + d_x_ad, d_w_r)
        d_keys, d_values, d_x_ad = gate_backward_rows(pool.keys, pool.values, xs, cache, dys)
        return AdapterGrads(idx, d_keys[sl], d_values[sl], d_xs + d_x_ad)

    def param_counts(self) -> tuple[int, int]:
        return param_counts(self)


def gate_backward_rows(keys, values, xs, gb: GateBatch, dys):
    """Adapter-path gradients ``(d_keys, d_values, d_xs)`` of the self-activated gate."""
    a, n, final = gb.a, gb.n, gb.final_w
    g = dys @ values.T
    d_values = (final * a).T @ dys
    d_a = final * g
    mode = gb.mode
    if mode is not GateMode.DENSE:
        d_w = a * g
        if gb.direct_scores:
            d_s = d_w
        else:
            d_sw = np.where(gb.prune_mask, d_w, 0.0)
            sw = gb.softmax_w
            # masked entries have sw == 0, so the top-k restriction falls out here
            d_s = sw * (d_sw - np.sum(sw * d_sw, axis=1, keepdims=True)) / gb.tau
        # d s_i / d a_j = delta_ij / n - a_i a_j / n^3
        proj = np.sum(d_s * a, axis=1) / n**3
        d_a = d_a + d_s / n[:, None] - a * proj[:, None]
    d_keys = d_a.T @ xs
    d_xs = d_a @ keys
    return d_keys, d_values, d_xs


def adapter_forward(layer: AdaptedLinear, x):
    """Single-input forward: ``(y, trace)``; an empty pool yields an empty trace."""
    x = as_vector(x, "x")
    if x.shape[0] != layer.d_in:
        raise DimensionError(f"layer expects inputs of length {layer.d_in}, got {x.shape[0]}")
    y, cache = layer.forward_rows(x[None, :])
    if cache is None:
        empty = np.zeros(0)
        trace = GateTrace(empty, float(np.sqrt(layer.cfg.eps)), empty, np.zeros(0, dtype=np.int64),
                          empty, np.zeros(0, dtype=bool), empty, layer.cfg.mode, layer.cfg.tau)
        return y[0], trace
    return y[0], cache.trace(0)


def adapter_backward(layer: AdaptedLinear, x, trace, dy) -> AdapterGrads:
    x = as_vector(x, "x")
    dy = as_vector(dy, "dy")
    if dy.shape[0] != layer.d_out:
        raise DimensionError(f"dy has length {dy.shape[0]}, layer has d_out {layer.d_out}")
    r_t = layer.pool.r_t
    if trace.final_w.shape[0] != r_t:
        raise TraceMismatch(f"trace covers {trace.final_w.shape[0]} ranks but the layer has {r_t}")
    if r_t == 0:
        g = layer.backward_rows(x[None, :], None, dy[None, :])
        g.d_x = g.d_x[0]
        return g
    a = x @ layer.pool.keys.T
    if not np.allclose(a, trace.activations_a, rtol=1e-12, atol=1e-12):
        raise TraceMismatch("trace activations do not match this layer and input")
    if isinstance(trace, GateTrace):
        cache = GateBatch.from_trace(trace)
    else:
        cache = RouterBatch(a=trace.activations_a[None, :], logits=trace.logits[None, :],
                            topk_mask=np.isin(np.arange(trace.logits.size), trace.topk_set)[None, :],
                            softmax_w=trace.softmax_w[None, :], final_w=trace.final_w[None, :],
                            groups=groups_for(trace.mode, layer.pool.task_ids), mode=trace.mode)
    g = layer.backward_rows(x[None, :], cache, dy[None, :])
    g.d_x = g.d_x[0]
    return g


def param_counts(layer: AdaptedLinear) -> tuple[int, int]:
    """Parameters added per task and parameters that receive gradient per input."""
    r = layer.pool.r_per_task
    added = r * (layer.d_in + layer.d_out)
    activated = r * layer.d_in + min(layer.cfg.budget_k, r) * layer.d_out
    return added, activated


def moe_lora_param_count(r: int, d_in: int, d_out: int) -> int:
    """Per-expert trainable count of a routed LoRA expert: the block plus its router column."""
    return r * (d_in + d_out) + d_in
