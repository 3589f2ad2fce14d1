"""Model checkpoints: a JSON manifest plus one raw little-endian float64 file per tensor.

Layout of a checkpoint directory::

    manifest.json
    tensors/<layer>.<field>.bin

The manifest records the run configuration, layer shapes, rank ownership and
frozen flags, and a SHA-256 of every tensor file. Loading verifies every hash
before any array is used.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from rankmix.adapter import AdaptedLinear
from rankmix.baselines import RouterParams
from rankmix.config import RunConfig
from rankmix.errors import ChecksumError, ConfigError
from rankmix.gate import GateConfig
from rankmix.trainer import AccuracyMatrix, ToyModel

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _encode(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(path, model: ToyModel, cfg: RunConfig, acc: AccuracyMatrix | None = None,
                    tasks_done: int = 0) -> dict:
    """Write ``model`` (and optionally the accuracy rows so far) under ``path``; returns the manifest."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}

    def put(name: str, arr: np.ndarray) -> None:
        data = _encode(arr)
        fname = f"tensors/{name}.bin"
        (root / fname).write_bytes(data)
        tensors[name] = {"file": fname, "shape": list(arr.shape), "sha256": _sha256(data)}

    layers = []
    for layer, adapted in zip(model.layers, model.adapted):
        pool = layer.pool
        put(f"{layer.name}.w0", layer.w0)
        put(f"{layer.name}.keys", pool.keys)
        put(f"{layer.name}.values", pool.values)
        entry = {
            "name": layer.name,
            "d_in": layer.d_in,
            "d_out": layer.d_out,
            "adapted": bool(adapted),
            "r_per_task": pool.r_per_task,
            "rank_count": pool.r_t,
            "task_ids": pool.task_ids.tolist(),
            "frozen": pool.frozen.tolist(),
            "gate": {**{k: getattr(layer.cfg, k) for k in ("tau", "budget_k", "delta", "eps", "raw_weights",
                                                            "router_k", "router_freeze_old")},
                     "mode": layer.cfg.mode.value},
        }
        if layer.router is not None:
            put(f"{layer.name}.router", layer.router.w_r)
            entry["router_frozen_columns"] = layer.router.n_frozen
        layers.append(entry)
    if acc is not None:
        put("accuracy_matrix", acc.acc)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tasks_done": tasks_done,
        "task_ids": acc.task_ids if acc is not None else [],
        "layers": layers,
        "tensors": tensors,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    file = Path(path) / "manifest.json"
    if not file.is_file():
        raise ConfigError(f"no checkpoint manifest at {file}")
    manifest = json.loads(file.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{file}: unsupported checkpoint format_version {version!r}")
    return manifest


def _load_tensor(root: Path, meta: dict) -> np.ndarray:
    data = (root / meta["file"]).read_bytes()
    if _sha256(data) != meta["sha256"]:
        raise ChecksumError(f"hash mismatch for {meta['file']}")
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
    if len(data) != expected:
        raise ChecksumError(f"{meta['file']} holds {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=_DTYPE).reshape(shape).astype(np.float64)


def load_checkpoint(path):
    """``(model, config, accuracy_matrix_or_None, tasks_done)`` from a checkpoint directory."""
    root = Path(path)
    manifest = read_manifest(root)
    metas = manifest["tensors"]
    cfg = RunConfig.from_dict(manifest["config"])
    layers, adapted = [], []
    for entry in manifest["layers"]:
        name = entry["name"]
        gate = GateConfig(**entry["gate"])
        layer = AdaptedLinear(_load_tensor(root, metas[f"{name}.w0"]), gate, entry["r_per_task"], name)
        pool = layer.pool
        pool.keys = _load_tensor(root, metas[f"{name}.keys"])
        pool.values = _load_tensor(root, metas[f"{name}.values"])
        pool.task_ids = np.asarray(entry["task_ids"], dtype=np.int64)
        pool.frozen = np.asarray(entry["frozen"], dtype=bool)
        if pool.r_t != entry["rank_count"] or pool.task_ids.size != pool.r_t:
            raise ChecksumError(f"layer {name}: rank count does not match the stored tensors")
        pool.check()
        if f"{name}.router" in metas:
            layer.router = RouterParams(_load_tensor(root, metas[f"{name}.router"]),
                                        int(entry.get("router_frozen_columns", 0)))
        layers.append(layer)
        adapted.append(bool(entry["adapted"]))
    acc = None
    if "accuracy_matrix" in metas:
        acc = AccuracyMatrix(_load_tensor(root, metas["accuracy_matrix"]), list(manifest["task_ids"]))
    return ToyModel(layers, adapted), cfg, acc, int(manifest["tasks_done"])


def checkpoint_hashes(path) -> dict[str, str]:
    return {name: meta["sha256"] for name, meta in read_manifest(path)["tensors"].items()}
