"""Read-only statistics over gate weights: activation profiles, coverage, reuse, entropy.

All functions run the model forward and look at ``final_w`` only; nothing is
written back into the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rankmix.adapter import param_counts
from rankmix.errors import ConfigError, DimensionError
from rankmix.gate import entropy
from rankmix.taskgen import TaskStream, task_split


@dataclass
class LayerProfile:
    name: str
    mean_abs_w: np.ndarray  # (r_t,)
    frequency: np.ndarray  # (r_t,) fraction of inputs with a nonzero weight
    task_ids: np.ndarray  # (r_t,) owning task of each rank
    n_inputs: int


@dataclass
class ActivationProfile:
    layers: list[LayerProfile]

    def layer(self, name: str) -> LayerProfile:
        for lp in self.layers:
            if lp.name == name:
                return lp
        raise KeyError(name)


def _layer_weights(model, xs: np.ndarray, chunk: int = 1024) -> dict[str, list[np.ndarray]]:
    """``final_w`` of every adapted layer for the rows of ``xs``, in row order."""
    out: dict[str, list[np.ndarray]] = {l.name: [] for l in model.adapted_layers}
    adapted = {l.name for l in model.adapted_layers}
    for start in range(0, xs.shape[0], chunk):
        _, caches = model.forward_rows(xs[start:start + chunk])
        for layer, (_, gate) in zip(model.layers, caches):
            if layer.name in adapted and gate is not None:
                out[layer.name].append(gate.final_w)
    return out


def _dataset_inputs(model, dataset) -> np.ndarray:
    if isinstance(dataset, TaskStream):
        xs = np.concatenate([task_split(t, "test")[0] for t in dataset.tasks])
    elif isinstance(dataset, tuple):
        xs = np.asarray(dataset[0], dtype=np.float64)
    else:
        xs = np.asarray(dataset, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ConfigError("activation statistics need a non-empty 2-D batch of inputs")
    if xs.shape[1] != model.layers[0].d_in:
        raise DimensionError(f"model expects inputs of length {model.layers[0].d_in}, got {xs.shape[1]}")
    return xs


def activation_profile(model, dataset) -> ActivationProfile:
    """Mean absolute gate weight and firing frequency of every rank, per adapted layer.

    ``dataset`` is an input matrix, an ``(inputs, labels)`` pair, or a whole
    :class:`TaskStream`, in which case the union of all test splits is used.
    """
    xs = _dataset_inputs(model, dataset)
    weights = _layer_weights(model, xs)
    layers = []
    for layer in model.adapted_layers:
        if layer.pool.r_t == 0:
            raise ConfigError(f"layer {layer.name} has an empty rank pool")
        w = np.abs(np.concatenate(weights[layer.name]))
        layers.append(LayerProfile(layer.name, w.mean(axis=0), (w > 0).mean(axis=0),
                                   layer.pool.task_ids.copy(), xs.shape[0]))
    return ActivationProfile(layers)


def coverage_of(mean_w: np.ndarray, fraction: float = 0.99) -> int:
    """Fewest ranks whose sorted mean activations reach ``fraction`` of the total."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    v = np.sort(np.abs(np.asarray(mean_w, dtype=np.float64)))[::-1]
    total = v.sum()
    if total == 0:
        return 0
    if fraction == 1:
        return int(np.count_nonzero(v))
    cum = np.cumsum(v)
    # guard the comparison against summation round-off at the exact boundary
    return int(min(np.searchsorted(cum, fraction * total * (1 - 1e-12), side="left") + 1, v.size))


def coverage_count(profile: ActivationProfile, fraction: float = 0.99) -> dict[str, int]:
    return {lp.name: coverage_of(lp.mean_abs_w, fraction) for lp in profile.layers}


def reuse_matrix(model, stream: TaskStream, layer: str | None = None) -> np.ndarray:
    """``M[t, u]``: share of gate mass on task-``u`` ranks while reading task-``t`` test data.

    Mass is summed over the adapted layers unless ``layer`` names one of them.
    Rows with no mass at all (fully pruned) are left at zero.
    """
    T = len(stream.tasks)
    ids = [t.task_id for t in stream.tasks]
    col = {tid: j for j, tid in enumerate(ids)}
    layers = [l for l in model.adapted_layers if layer is None or l.name == layer]
    if layer is not None and not layers:
        raise KeyError(layer)
    out = np.zeros((T, T))
    for i, task in enumerate(stream.tasks):
        xs, _ = task_split(task, "test")
        weights = _layer_weights(model, xs)
        for l in layers:
            if not weights[l.name]:
                continue
            mass = np.abs(np.concatenate(weights[l.name])).sum(axis=0)
            for tid, m in zip(l.pool.task_ids, mass):
                if tid in col:
                    out[i, col[tid]] += m
        total = out[i].sum()
        if total > 0:
            out[i] /= total
    return out


def gate_entropy(trace) -> float:
    """Entropy of a trace's final weights, normalized to sum 1; 0 when all are zero."""
    return entropy(trace.final_w)


def parameter_report(model) -> list[dict]:
    """Per adapted layer: parameters added per task and parameters active per input."""
    rows = []
    for layer in model.adapted_layers:
        added, activated = param_counts(layer)
        rows.append({"layer": layer.name, "d_in": layer.d_in, "d_out": layer.d_out,
                     "added_per_task": added, "activated_per_input": activated})
    return rows


def coverage_fraction(count: int, r_t: int) -> float:
    return count / r_t if r_t else math.nan
