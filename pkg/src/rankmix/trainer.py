"""Frozen-base toy model, AdamW, the continual-learning loop and its metrics.

The model is an MLP ``fc1 -> tanh -> ... -> head`` whose every linear map is
an :class:`AdaptedLinear`. The head covers the global label space of the
stream. By default training and evaluation are class-incremental: the
softmax and the argmax run over every class seen in the stream, so a task's
inputs can be mistaken for another task's classes. ``scope="task"`` restricts
both to the task's own block instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rankmix.adapter import AdaptedLinear, AdapterGrads
from rankmix.baselines import RouterParams
from rankmix.config import ArchConfig, OptimConfig, PretrainConfig, RunConfig
from rankmix.errors import DimensionError
from rankmix.gate import GateConfig
from rankmix.numerics import softmax_rows
from rankmix.taskgen import TaskSpec, TaskStream, pretrain_split, task_split

log = logging.getLogger(__name__)

# SeedSequence keys for the trainer's own random streams
_INIT, _GROW, _BATCHES, _PRETRAIN_BATCHES = 10, 11, 12, 13


def layer_names(n_layers: int) -> list[str]:
    return [f"fc{i + 1}" for i in range(n_layers - 1)] + ["head"]


class ToyModel:
    def __init__(self, layers: list[AdaptedLinear], adapted: list[bool] | None = None):
        self.layers = layers
        self.adapted = adapted if adapted is not None else [True] * len(layers)
        # called as sink(layer_name, gate_cache) on every forward pass when set
        self.trace_sink: Callable | None = None

    @property
    def head(self) -> AdaptedLinear:
        return self.layers[-1]

    @property
    def adapted_layers(self) -> list[AdaptedLinear]:
        return [l for l, a in zip(self.layers, self.adapted) if a]

    def forward_rows(self, xs: np.ndarray):
        """Logits for each row and the per-layer caches needed by :meth:`backward_rows`."""
        caches = []
        h = xs
        for i, layer in enumerate(self.layers):
            z, gate = layer.forward_rows(h)
            if self.trace_sink is not None and gate is not None:
                self.trace_sink(layer.name, gate)
            caches.append((h, gate))
            h = np.tanh(z) if i < len(self.layers) - 1 else z
        return h, caches

    def backward_rows(self, caches, d_logits: np.ndarray) -> list[AdapterGrads]:
        grads: list[AdapterGrads] = [None] * len(self.layers)
        d = d_logits
        for i in range(len(self.layers) - 1, -1, -1):
            h_in, gate = caches[i]
            g = self.layers[i].backward_rows(h_in, gate, d)
            grads[i] = g
            if i > 0:
                # h_in = tanh(z_prev)
                d = g.d_x * (1.0 - h_in**2)
        return grads

    def grow(self, r_new: int, task_id: int, seed: int) -> None:
        for i, layer in enumerate(self.layers):
            if self.adapted[i]:
                layer.grow(r_new, task_id, np.random.SeedSequence([seed, _GROW, task_id, i]))

    def trainable(self) -> dict[str, np.ndarray]:
        """Views onto every non-frozen parameter, keyed by a stable name."""
        params = {}
        for layer in self.adapted_layers:
            sl = layer.pool.trainable_slice()
            if sl.stop > sl.start:
                params[f"{layer.name}.keys"] = layer.pool.keys[sl]
                params[f"{layer.name}.values"] = layer.pool.values[sl]
            if layer.router is not None and layer.router.n_columns > layer.router.n_frozen:
                params[f"{layer.name}.router"] = layer.router.w_r[:, layer.router.n_frozen:]
        return params

    def predict(self, xs: np.ndarray, task: TaskSpec, scope: str = "all", chunk: int = 1024) -> np.ndarray:
        """Global class ids predicted for ``xs``; ``scope="task"`` restricts the argmax to ``task``'s block."""
        out = []
        block = label_block(task, self.head.d_out, scope)
        for start in range(0, xs.shape[0], chunk):
            logits, _ = self.forward_rows(xs[start:start + chunk])
            out.append(block.start + np.argmax(logits[:, block], axis=1))
        return np.concatenate(out)

    def set_gate(self, cfg: GateConfig) -> None:
        """Switch the gate configuration of every layer; only allowed before any rank exists."""
        for layer in self.layers:
            if layer.pool.r_t:
                raise DimensionError(f"cannot change the gate of {layer.name}: its rank pool is not empty")
            layer.cfg = cfg
            layer.router = RouterParams.empty(layer.d_in) if cfg.mode.is_router else None

    def copy(self) -> "ToyModel":
        layers = []
        for l in self.layers:
            c = AdaptedLinear(l.w0, l.cfg, l.pool.r_per_task, l.name)
            c.pool = l.pool.copy()
            if l.router is not None:
                c.router = RouterParams(l.router.w_r.copy(), l.router.n_frozen)
            layers.append(c)
        return ToyModel(layers, list(self.adapted))


def label_block(task: TaskSpec, n_outputs: int, scope: str) -> slice:
    if scope == "task":
        return slice(task.class_offset, task.class_offset + task.n_classes)
    if scope == "all":
        return slice(0, n_outputs)
    raise DimensionError(f"unknown label scope {scope!r}")


def build_model(weights: list[np.ndarray], cfg: GateConfig, r_per_task: int, adapt_layers=("all",)) -> ToyModel:
    names = layer_names(len(weights))
    adapt_all = "all" in adapt_layers
    unknown = set(adapt_layers) - set(names) - {"all"}
    if unknown:
        raise DimensionError(f"unknown adapted layer name(s): {sorted(unknown)}; model has {names}")
    layers = [AdaptedLinear(w, cfg, r_per_task, name) for w, name in zip(weights, names)]
    return ToyModel(layers, [adapt_all or n in adapt_layers for n in names])


# ---------------------------------------------------------------- losses


def cross_entropy(logits, label: int):
    """``(loss, dlogits)`` of softmax cross-entropy for one example."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise DimensionError(f"label {label} out of range for {logits.shape[0]} logits")
    loss, d = cross_entropy_rows(logits[None, :], np.array([label]))
    return loss, d[0]


def cross_entropy_rows(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over rows and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    d = softmax_rows(logits)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimState":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)


def adamw_step(opt: OptimState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Only names present in ``params`` are touched; moments are allocated lazily
    for exactly those names.
    """
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay:
            p *= 1.0 - opt.lr * opt.weight_decay
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def collect_grads(model: ToyModel, grads: list[AdapterGrads]) -> dict[str, np.ndarray]:
    out = {}
    for layer, g, adapted in zip(model.layers, grads, model.adapted):
        if not adapted:
            continue
        if g.d_key_a.shape[0]:
            out[f"{layer.name}.keys"] = g.d_key_a
            out[f"{layer.name}.values"] = g.d_value_b
        if g.d_router is not None and layer.router.n_columns > layer.router.n_frozen:
            out[f"{layer.name}.router"] = g.d_router[:, layer.router.n_frozen:]
    return out


# ---------------------------------------------------------------- pretraining


def init_weights(dims: list[int], seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT]))
    return [rng.normal(0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1)]


def _mlp_forward(weights, xs):
    hs = [xs]
    for i, w in enumerate(weights):
        z = hs[-1] @ w.T
        hs.append(np.tanh(z) if i < len(weights) - 1 else z)
    return hs


def pretrain_base(arch: ArchConfig, stream: TaskStream, seed: int, cfg: PretrainConfig,
                  gate: GateConfig, r_per_task: int, scope: str = "all"):
    """Train plain MLP weights on canonical-domain data, then freeze them into a :class:`ToyModel`.

    Returns the model and ``{split: (accuracy, loss)}`` on the pretraining splits.
    """
    cpt = stream.params.classes_per_task
    dims = [stream.d, *arch.hidden, stream.n_classes]
    weights = init_weights(dims, seed)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PRETRAIN_BATCHES]))
    params = {str(i): w for i, w in enumerate(weights)}

    def scoped(split):
        xs, labels, which = pretrain_split(stream, split)
        if scope == "all":
            cols = np.broadcast_to(np.arange(stream.n_classes), (xs.shape[0], stream.n_classes))
            return xs, which * cpt + labels, cols
        return xs, labels, which[:, None] * cpt + np.arange(cpt)[None, :]

    xs, targets, cols = scoped("train")
    if xs.shape[0]:
        for _ in range(cfg.steps):
            idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
            hs = _mlp_forward(weights, xs[idx])
            c = cols[idx]
            _, d_sel = cross_entropy_rows(np.take_along_axis(hs[-1], c, axis=1), targets[idx])
            d = np.zeros_like(hs[-1])
            np.put_along_axis(d, c, d_sel, axis=1)
            grads = {}
            for i in range(len(weights) - 1, -1, -1):
                grads[str(i)] = d.T @ hs[i]
                if i > 0:
                    d = (d @ weights[i]) * (1.0 - hs[i] ** 2)
            adamw_step(opt, params, grads)

    metrics = {}
    for split in ("train", "test"):
        sx, st, sc = scoped(split)
        sel = np.take_along_axis(_mlp_forward(weights, sx)[-1], sc, axis=1)
        loss, _ = cross_entropy_rows(sel, st)
        metrics[split] = (float(np.mean(np.argmax(sel, axis=1) == st)), loss)
    return build_model(weights, gate, r_per_task, arch.adapt_layers), metrics


# ---------------------------------------------------------------- continual loop


def evaluate(model: ToyModel, task: TaskSpec, scope: str = "all") -> float:
    xs, labels = task_split(task, "test")
    return float(np.mean(model.predict(xs, task, scope) == task.class_offset + labels))


def train_task(model: ToyModel, task: TaskSpec, optim: OptimConfig, iters: int | None = None,
               seed: int = 0, scope: str = "all") -> list[float]:
    """Optimize the model's non-frozen parameters on ``task``; returns the per-step losses."""
    iters = optim.iters if iters is None else iters
    xs, labels = task_split(task, "train")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCHES, task.task_id]))
    opt = OptimState.from_config(optim)
    params = model.trainable()
    block = label_block(task, model.head.d_out, scope)
    targets = task.class_offset + labels - block.start
    losses = []
    for _ in range(iters):
        idx = rng.integers(0, xs.shape[0], size=optim.batch_size)
        logits, caches = model.forward_rows(xs[idx])
        loss, d_block = cross_entropy_rows(logits[:, block], targets[idx])
        d_logits = np.zeros_like(logits)
        d_logits[:, block] = d_block
        grads = collect_grads(model, model.backward_rows(caches, d_logits))
        adamw_step(opt, params, grads)
        losses.append(loss)
    return losses


@dataclass
class AccuracyMatrix:
    """``acc[i][j]``: accuracy on task j's test split after finishing training task i (0-based)."""

    acc: np.ndarray
    task_ids: list[int]

    @classmethod
    def empty(cls, task_ids: list[int]) -> "AccuracyMatrix":
        T = len(task_ids)
        return cls(np.full((T, T), np.nan), list(task_ids))

    @property
    def T(self) -> int:
        return len(self.task_ids)

    def rows_done(self) -> int:
        return int(np.sum(~np.isnan(self.acc).any(axis=1)))


def continual_run(stream: TaskStream, run_cfg: RunConfig, model: ToyModel, start_task: int = 0,
                  acc: AccuracyMatrix | None = None, on_task_end: Callable | None = None,
                  losses: dict | None = None) -> AccuracyMatrix:
    """Grow, train and evaluate task by task; ``start_task`` resumes a partially trained model."""
    acc = acc if acc is not None else AccuracyMatrix.empty([t.task_id for t in stream.tasks])
    for t in range(start_task, len(stream.tasks)):
        task = stream.tasks[t]
        if run_cfg.grow_per_task or t == 0:
            model.grow(run_cfg.r_per_task, task.task_id, run_cfg.seed)
        task_losses = train_task(model, task, run_cfg.optim, seed=run_cfg.seed, scope=run_cfg.train_scope)
        if losses is not None:
            losses[task.task_id] = task_losses
        for j, other in enumerate(stream.tasks):
            acc.acc[t, j] = evaluate(model, other, run_cfg.eval_scope)
        log.info("task %d done: acc row %s", task.task_id, np.round(acc.acc[t], 3).tolist())
        if on_task_end is not None:
            on_task_end(t, model, acc)
    return acc


@dataclass
class Metrics:
    transfer: float
    average: float
    last: float
    average_steps: float  # alternative: mean over every training step, per task, then over tasks
    per_task: list[dict]


def compute_metrics(acc: AccuracyMatrix) -> Metrics:
    a = acc.acc
    T = acc.T
    per_task = []
    transfers, lasts, steps = [], [], []
    for j in range(T):
        last = float(a[T - 1, j])
        transfer = float(np.mean(a[:j, j])) if j > 0 else None
        row = {"task": acc.task_ids[j], "transfer": transfer, "last": last,
               "average": (transfer + last) / 2 if transfer is not None else None}
        per_task.append(row)
        lasts.append(last)
        steps.append(float(np.mean(a[:, j])))
        if transfer is not None:
            transfers.append(transfer)
    last = float(np.mean(lasts))
    transfer = float(np.mean(transfers)) if transfers else float("nan")
    average = (transfer + last) / 2 if transfers else last
    return Metrics(transfer=transfer, average=average, last=last, average_steps=float(np.mean(steps)),
                   per_task=per_task)
