"""Seeded Gaussian-prototype task streams for class-incremental experiments.

Every task owns ``classes_per_task`` fresh class ids. The prototype of class
``c`` in task ``t`` is

    radius * (sqrt(f) * u_c + sqrt(1 - f) * v_tc)

with ``u_c`` a unit vector in a subspace shared by all tasks (the same for
class slot ``c`` of every task) and ``v_tc`` a unit vector in its orthogonal
complement. A share ``domain_weight`` of the energy of ``v_tc`` points along a
per-task domain direction common to all classes of that task, so tasks differ
by a mean offset as well as by class layout. ``f`` is the shared energy fraction. Inputs of task ``t`` are
``R_t (prototype + sigma * noise)`` where ``R_t`` is a task rotation.
``shift_strength`` scales both how far ``v_tc`` drifts away from a common
base direction and how far ``R_t`` is from the identity, so a strength of 0 gives
every task exactly the same distribution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from rankmix.errors import ConfigError

# SeedSequence spawn keys; keep these stable, they define the data
_PROTOTYPES, _TRAIN, _TEST, _PRETRAIN, _DOMAINS = 0, 1, 2, 3, 4


@dataclass
class TaskSpec:
    task_id: int
    class_prototypes: np.ndarray  # (classes, d)
    noise_sigma: float
    rotation: np.ndarray  # (d, d) orthogonal
    train_size: int
    test_size: int
    seed: int
    class_offset: int  # global id of this task's first class

    @property
    def n_classes(self) -> int:
        return self.class_prototypes.shape[0]

    @property
    def class_ids(self) -> np.ndarray:
        return self.class_offset + np.arange(self.n_classes)


@dataclass
class StreamParams:
    seed: int = 0
    T: int = 5
    classes_per_task: int = 4
    d: int = 32
    shared_dim: int = 8
    shift_strength: float = 1.0
    shared_fraction: float = 0.85
    radius: float = 3.0
    noise_sigma: float = 0.3
    domain_weight: float = 0.3
    train_size: int = 512
    test_size: int = 256
    pretrain_size: int = 4096

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    shared_subspace: np.ndarray  # (d, shared_dim) orthonormal columns
    params: StreamParams = field(default_factory=StreamParams)

    @property
    def n_classes(self) -> int:
        return sum(t.n_classes for t in self.tasks)

    @property
    def d(self) -> int:
        return self.shared_subspace.shape[0]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_stream(seed: int = 0, T: int = 5, classes_per_task: int = 4, d: int = 32, shared_dim: int = 8,
                shift_strength: float = 1.0, **kw) -> TaskStream:
    p = StreamParams(seed=seed, T=T, classes_per_task=classes_per_task, d=d, shared_dim=shared_dim,
                     shift_strength=shift_strength, **kw)
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < shared_dim < d:
        raise ConfigError(f"need 0 < shared_dim < d, got shared_dim={shared_dim}, d={d}")
    if classes_per_task < 2:
        raise ConfigError(f"classes_per_task must be >= 2, got {classes_per_task}")
    if not 0.0 <= p.shared_fraction <= 1.0:
        raise ConfigError(f"shared_fraction must lie in [0, 1], got {p.shared_fraction}")
    if not 0.0 <= p.domain_weight <= 1.0:
        raise ConfigError(f"domain_weight must lie in [0, 1], got {p.domain_weight}")
    if shift_strength < 0:
        raise ConfigError(f"shift_strength must be >= 0, got {shift_strength}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, _PROTOTYPES]))
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    shared, private = basis[:, :shared_dim], basis[:, shared_dim:]

    # shared part: one direction per class slot, reused by every task
    u = _unit_rows(rng.normal(size=(classes_per_task, shared_dim))) @ shared.T
    v_first = _unit_rows(rng.normal(size=(classes_per_task, d - shared_dim)))
    f = p.shared_fraction
    dom_rng = np.random.default_rng(np.random.SeedSequence([seed, _DOMAINS]))
    g_first = _unit_rows(dom_rng.normal(size=(1, d - shared_dim)))
    g = _unit_rows(g_first + shift_strength * dom_rng.normal(size=(T, d - shared_dim)))
    wd = p.domain_weight
    tasks = []
    for t in range(T):
        drift = rng.normal(size=(classes_per_task, d - shared_dim))
        skew = rng.normal(size=(d, d)) / np.sqrt(d)
        v = _unit_rows(np.sqrt(wd) * g[t] + np.sqrt(1.0 - wd) * _unit_rows(v_first + shift_strength * drift))
        protos = p.radius * (np.sqrt(f) * u + np.sqrt(1.0 - f) * (v @ private.T))
        rotation = expm(shift_strength * (skew - skew.T) / 2.0)
        tasks.append(TaskSpec(task_id=t + 1, class_prototypes=protos, noise_sigma=p.noise_sigma,
                              rotation=rotation, train_size=p.train_size, test_size=p.test_size,
                              seed=seed, class_offset=t * classes_per_task))
    return TaskStream(tasks=tasks, shared_subspace=shared, params=p)


def sample_batch(task: TaskSpec, n: int, rng: np.random.Generator):
    """``n`` inputs of ``task`` with task-local labels drawn uniformly."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    labels = rng.integers(0, task.n_classes, size=n)
    noise = rng.normal(size=(n, task.class_prototypes.shape[1]))
    x = (task.class_prototypes[labels] + task.noise_sigma * noise) @ task.rotation.T
    return x, labels


def task_split(task: TaskSpec, split: str):
    """Fixed train or test set of a task; the two come from independent seed streams."""
    if split == "train":
        key, n = _TRAIN, task.train_size
    elif split == "test":
        key, n = _TEST, task.test_size
    else:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, key, task.task_id]))
    return sample_batch(task, n, rng)


def pretrain_split(stream: TaskStream, split: str, n: int | None = None):
    """Canonical-domain data over every class of the stream: no task rotation applied.

    Returns inputs, task-local labels and the 0-based task index of each row.
    """
    n = stream.params.pretrain_size if n is None else n
    key = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng(np.random.SeedSequence([stream.params.seed, _PRETRAIN, key]))
    which = rng.integers(0, len(stream.tasks), size=n)
    xs = np.empty((n, stream.d))
    labels = np.empty(n, dtype=np.int64)
    for t, task in enumerate(stream.tasks):
        rows = np.flatnonzero(which == t)
        if rows.size == 0:
            continue
        labels[rows] = rng.integers(0, task.n_classes, size=rows.size)
        noise = rng.normal(size=(rows.size, stream.d))
        xs[rows] = task.class_prototypes[labels[rows]] + task.noise_sigma * noise
    return xs, labels, which


def shared_energy(stream: TaskStream) -> np.ndarray:
    """Fraction of each prototype's squared norm inside the shared subspace, per task and class."""
    out = []
    for task in stream.tasks:
        proj = task.class_prototypes @ stream.shared_subspace
        out.append(np.sum(proj**2, axis=1) / np.sum(task.class_prototypes**2, axis=1))
    return np.array(out)
