import json

import numpy as np
import pytest

from rankmix.checkpoint import checkpoint_hashes, load_checkpoint, read_manifest, save_checkpoint
from rankmix.config import RunConfig
from rankmix.errors import ChecksumError, ConfigError
from rankmix.taskgen import make_stream
from rankmix.trainer import AccuracyMatrix, continual_run, pretrain_base

TINY = {"stream.T": 3, "optim.iters": 30, "pretrain.steps": 150}


def tiny(mode="SelfAdaptive"):
    cfg = RunConfig().with_(**{**TINY, "mode": mode})
    stream = make_stream(seed=cfg.seed, **vars(cfg.stream))
    model, _ = pretrain_base(cfg.arch, stream, cfg.seed, cfg.pretrain, cfg.gate_config(), cfg.r_per_task)
    return cfg, stream, model


@pytest.mark.parametrize("mode", ["SelfAdaptive", "RouterLoRA", "RouterRank", "SeqLoRA"])
def test_round_trip_is_bitwise(tmp_path, mode):
    cfg, stream, model = tiny(mode)
    model.set_gate(cfg.gate_config())
    model.grow(cfg.r_per_task, 1, 0)
    rng = np.random.default_rng(0)
    for layer in model.layers:
        layer.pool.values[:] = rng.normal(size=layer.pool.values.shape)
        if layer.router is not None:
            layer.router.w_r[:] = rng.normal(size=layer.router.w_r.shape)
    save_checkpoint(tmp_path / "ck", model, cfg)
    loaded, cfg2, acc2, done = load_checkpoint(tmp_path / "ck")
    xs = rng.normal(size=(100, 32))
    assert loaded.forward_rows(xs)[0].tobytes() == model.forward_rows(xs)[0].tobytes()
    assert cfg2.to_dict() == cfg.to_dict()
    assert acc2 is None and done == 0
    for a, b in zip(model.layers, loaded.layers):
        assert a.pool.frozen.tolist() == b.pool.frozen.tolist()
        assert a.cfg == b.cfg


def test_manifest_is_readable_and_versioned(tmp_path):
    cfg, _, model = tiny()
    save_checkpoint(tmp_path, model, cfg)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert [l["name"] for l in manifest["layers"]] == ["fc1", "head"]
    meta = manifest["tensors"]["fc1.w0"]
    raw = (tmp_path / meta["file"]).read_bytes()
    assert len(raw) == 64 * 32 * 8
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8").reshape(64, 32), model.layers[0].w0)


def test_hash_mismatch_raises(tmp_path):
    cfg, _, model = tiny()
    save_checkpoint(tmp_path, model, cfg)
    f = tmp_path / "tensors" / "head.w0.bin"
    data = bytearray(f.read_bytes())
    data[0] ^= 1
    f.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path)


def test_missing_or_wrong_version(tmp_path):
    with pytest.raises(ConfigError):
        read_manifest(tmp_path)
    cfg, _, model = tiny()
    save_checkpoint(tmp_path, model, cfg)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)


def test_same_seed_same_hashes(tmp_path):
    cfg, _, a = tiny()
    _, _, b = tiny()
    save_checkpoint(tmp_path / "a", a, cfg)
    save_checkpoint(tmp_path / "b", b, cfg)
    assert checkpoint_hashes(tmp_path / "a") == checkpoint_hashes(tmp_path / "b")


def test_resume_reproduces_next_row(tmp_path):
    cfg, stream, model = tiny()
    full = continual_run(stream, cfg, model.copy())

    def stop_after_first(t, m, acc):
        if t == 0:
            save_checkpoint(tmp_path, m, cfg, acc, tasks_done=1)

    continual_run(stream, cfg, model, on_task_end=stop_after_first)
    resumed_model, cfg2, acc, done = load_checkpoint(tmp_path)
    assert done == 1 and acc.rows_done() == 1
    resumed = continual_run(stream, cfg2, resumed_model, start_task=done, acc=acc)
    assert resumed.acc.tobytes() == full.acc.tobytes()


def test_accuracy_rows_survive(tmp_path):
    cfg, _, model = tiny()
    acc = AccuracyMatrix.empty([1, 2])
    acc.acc[0] = [0.25, 0.5]
    save_checkpoint(tmp_path, model, cfg, acc, tasks_done=1)
    _, _, back, _ = load_checkpoint(tmp_path)
    assert back.task_ids == [1, 2]
    assert back.acc.tobytes() == acc.acc.tobytes()
