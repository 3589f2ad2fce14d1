"""Command-line interface: ``rankmix {pretrain,train,ablate,analyze}``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for runtime
or data errors (bad checkpoint, unwritable output, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from rankmix.analysis import activation_profile, coverage_count, reuse_matrix
from rankmix.checkpoint import load_checkpoint, save_checkpoint
from rankmix.config import RUN_MODES, RunConfig, load_config
from rankmix.errors import ConfigError, RankmixError
from rankmix.taskgen import TaskStream, make_stream, task_split
from rankmix.trainer import AccuracyMatrix, ToyModel, compute_metrics, continual_run, pretrain_base

OUT_ROOT_ENV = "RANKMIX_OUT_ROOT"
SWEEP_AXES = {"budget": "gate.budget_k", "tau": "gate.tau", "delta": "gate.delta", "mode": "mode"}

log = logging.getLogger("rankmix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def resolve_out(cfg: RunConfig, out: str | None) -> Path:
    """``--out`` wins over the config; relative paths land under $RANKMIX_OUT_ROOT when it is set."""
    path = Path(out if out is not None else cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return cfg.with_(**changes) if changes else cfg


def stream_for(cfg: RunConfig) -> TaskStream:
    return make_stream(seed=cfg.seed, **vars(cfg.stream))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def pretrained(cfg: RunConfig, stream: TaskStream):
    return pretrain_base(cfg.arch, stream, cfg.seed, cfg.pretrain, cfg.gate_config(), cfg.r_per_task, cfg.train_scope)


def write_matrix(path: Path, acc: AccuracyMatrix) -> None:
    rows = [[acc.task_ids[i], *acc.acc[i]] for i in range(acc.rows_done())]
    write_csv(path, ["after_task", *[f"task_{t}" for t in acc.task_ids]], rows)


def write_metrics(path: Path, acc: AccuracyMatrix) -> None:
    m = compute_metrics(acc)
    rows = [[r["task"], r["transfer"], r["average"], r["last"]] for r in m.per_task]
    rows.append(["mean", m.transfer, m.average, m.last])
    write_csv(path, ["task", "transfer", "average", "last"], rows)


def write_traces(path: Path, model: ToyModel, stream: TaskStream, per_task: int) -> None:
    """Gate traces of the first ``per_task`` test inputs of every task, one JSON object per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for task in stream.tasks:
            xs, _ = task_split(task, "test")
            _, caches = model.forward_rows(xs[:per_task])
            for layer, (_, gate) in zip(model.layers, caches):
                if gate is None:
                    continue
                for i in range(len(gate)):
                    rec = {"task": task.task_id, "layer": layer.name, "index": i, **gate.trace(i).to_record()}
                    fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = resolve_out(cfg, args.out)
    model, metrics = pretrained(cfg, stream_for(cfg))
    save_checkpoint(out / "base", model, cfg)
    write_csv(out / "pretrain_metrics.csv", ["split", "accuracy", "loss"],
              [[split, acc, loss] for split, (acc, loss) in metrics.items()])
    cfg.save(out / "config.json")
    print(f"pretrain: test accuracy {metrics['test'][0]:.4f}; checkpoint at {out / 'base'}")
    return 0


def _load_base(path, cfg: RunConfig) -> ToyModel:
    model, _, _, _ = load_checkpoint(path)
    if any(l.pool.r_t for l in model.layers):
        raise ConfigError(f"{path} is not a base checkpoint: its rank pools are not empty")
    model.set_gate(cfg.gate_config())
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    out = resolve_out(cfg, args.out)
    stream = stream_for(cfg)
    if args.resume:
        model, saved_cfg, acc, start = load_checkpoint(args.resume)
        if saved_cfg.to_dict() != cfg.to_dict():
            log.warning("resuming with a config that differs from the checkpoint's; using the checkpoint's")
        cfg = saved_cfg
        if acc is None:
            raise ConfigError(f"{args.resume} has no accuracy rows to resume from")
    else:
        if args.base:
            model = _load_base(args.base, cfg)
        else:
            model, metrics = pretrained(cfg, stream)
            save_checkpoint(out / "base", model, cfg)
            write_csv(out / "pretrain_metrics.csv", ["split", "accuracy", "loss"],
                      [[split, a, l] for split, (a, l) in metrics.items()])
        acc, start = None, 0

    def on_task_end(t, m, a):
        save_checkpoint(out / "checkpoints" / f"task_{stream.tasks[t].task_id}", m, cfg, a, tasks_done=t + 1)
        write_matrix(out / "accuracy_matrix.csv", a)

    losses = {}
    acc = continual_run(stream, cfg, model, start_task=start, acc=acc, on_task_end=on_task_end, losses=losses)
    write_matrix(out / "accuracy_matrix.csv", acc)
    write_metrics(out / "metrics.csv", acc)
    write_csv(out / "train_loss.csv", ["task", "step", "loss"],
              [[tid, i, loss] for tid, ls in losses.items() for i, loss in enumerate(ls)])
    if args.traces:
        write_traces(out / "traces.jsonl", model, stream, args.traces)
    cfg.save(out / "config.json")
    m = compute_metrics(acc)
    print(f"train [{cfg.mode}]: transfer {m.transfer:.4f} average {m.average:.4f} last {m.last:.4f}")
    return 0


def parse_sweep(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise UsageError(f"--sweep expects axis=v1,v2,... got {spec!r}")
    axis, raw = spec.split("=", 1)
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise UsageError("--sweep needs at least one value")
    try:
        if axis == "budget":
            values = [int(v) for v in items]
        elif axis == "mode":
            values = items
        else:
            values = [float(v) for v in items]
    except ValueError as exc:
        raise UsageError(f"bad value in --sweep {spec!r}: {exc}") from exc
    return axis, values


def sweep(cfg: RunConfig, axis: str, values: list, seeds: list[int]) -> list[dict]:
    """One continual run per (value, seed); all values share one pretrained base per seed."""
    results = []
    for seed in seeds:
        seeded = cfg.with_(seed=seed)
        stream = stream_for(seeded)
        base, _ = pretrained(seeded, stream)
        for value in values:
            run_cfg = seeded.with_(**{SWEEP_AXES[axis]: value})
            model = base.copy()
            model.set_gate(run_cfg.gate_config())
            m = compute_metrics(continual_run(stream, run_cfg, model))
            results.append({"axis": axis, "value": value, "seed": seed,
                            "transfer": m.transfer, "average": m.average, "last": m.last})
    return results


def cmd_ablate(args) -> int:
    cfg = _config(args)
    axis, values = parse_sweep(args.sweep)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = resolve_out(cfg, args.out)
    results = sweep(cfg, axis, values, seeds)
    write_csv(out / "sweep_runs.csv", ["axis", "value", "seed", "transfer", "average", "last"],
              [[r[k] for k in ("axis", "value", "seed", "transfer", "average", "last")] for r in results])
    rows = []
    for value in values:
        sel = [r for r in results if r["value"] == value]
        rows.append([axis, value, *(float(np.mean([r[k] for r in sel])) for k in ("transfer", "average", "last"))])
    write_csv(out / "sweep.csv", ["axis", "value", "transfer", "average", "last"], rows)
    for row in rows:
        print(f"{axis}={row[1]}: transfer {row[2]:.4f} average {row[3]:.4f} last {row[4]:.4f}")
    return 0


def cmd_analyze(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.ckpt)
    out = resolve_out(cfg, args.out)
    stream = stream_for(cfg)
    if args.data == "union":
        data = stream
    else:
        ids = {t.task_id: t for t in stream.tasks}
        try:
            data = task_split(ids[int(args.data)], "test")
        except (KeyError, ValueError) as exc:
            raise UsageError(f"--data must be 'union' or a task id in {sorted(ids)}, got {args.data!r}") from exc

    layers = model.adapted_layers
    if all(l.pool.r_t for l in layers):
        profile = activation_profile(model, data)
        counts = coverage_count(profile, args.fraction)
        prof_rows = [[lp.name, i, int(lp.task_ids[i]), lp.mean_abs_w[i], lp.frequency[i]]
                     for lp in profile.layers for i in range(lp.mean_abs_w.size)]
    else:
        counts = {l.name: 0 for l in layers}
        prof_rows = []
    write_csv(out / "activation_profile.csv", ["layer", "rank", "task", "mean_abs_weight", "frequency"], prof_rows)
    position = {l.name: i for i, l in enumerate(model.layers)}
    write_csv(out / "coverage.csv", ["layer", "position", "ranks_for_99pct"],
              [[l.name, position[l.name], counts[l.name]] for l in layers])
    reuse = reuse_matrix(model, stream)
    ids = [t.task_id for t in stream.tasks]
    write_csv(out / "reuse_matrix.csv", ["data_task", *[f"ranks_task_{u}" for u in ids]],
              [[ids[i], *reuse[i]] for i in range(len(ids))])
    for l in layers:
        print(f"{l.name}: {counts[l.name]} of {l.pool.r_t} ranks carry {args.fraction:.0%} of the activation mass")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rankmix", description="Self-activated mixture of rank-1 adapters on a synthetic continual stream.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, mode=True):
        sp.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=f"output directory (relative paths go under ${OUT_ROOT_ENV} if set)")
        if mode:
            sp.add_argument("--mode", choices=RUN_MODES, help="gate strategy or dense baseline")

    sp = sub.add_parser("pretrain", help="train and freeze the base model")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="run the continual stream")
    common(sp)
    sp.add_argument("--base", help="base checkpoint from 'pretrain' (pretrains on the fly when omitted)")
    sp.add_argument("--resume", help="per-task checkpoint to continue from")
    sp.add_argument("--traces", type=int, default=0, metavar="N",
                    help="export gate traces of the first N test inputs per task")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="sweep one gate setting")
    common(sp)
    sp.add_argument("--sweep", required=True, help="axis=v1,v2,... with axis in budget|tau|delta|mode")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("analyze", help="activation statistics of a trained checkpoint")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--data", default="union", help="'union' of all test splits or one task id")
    sp.add_argument("--fraction", type=float, default=0.99, help="coverage mass fraction")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RankmixError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
