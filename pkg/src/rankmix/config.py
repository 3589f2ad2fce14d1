"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from rankmix.baselines import DenseVariant, dense_baseline_mode
from rankmix.errors import ConfigError
from rankmix.gate import GateConfig, GateMode

RUN_MODES = ("SelfAdaptive", "SelfSparse", "SelfRaw", "RouterLoRA", "RouterRank", "Dense", "SeqLoRA", "IncLoRA")


@dataclass
class ArchConfig:
    hidden: list[int] = field(default_factory=lambda: [64])
    # names of the layers that carry rank pools; hidden layers are fc1, fc2, ... and the last is head
    adapt_layers: list[str] = field(default_factory=lambda: ["all"])


@dataclass
class GateSection:
    tau: float = 0.1
    budget_k: int = 16
    delta: float = 0.2
    eps: float = 1e-12
    raw_weights: str = "softmax"
    router_k: int = 2
    router_freeze_old: bool = False


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    iters: int = 500
    batch_size: int = 32


@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0


@dataclass
class StreamConfig:
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


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "SelfAdaptive"
    r_per_task: int = 16
    arch: ArchConfig = field(default_factory=ArchConfig)
    gate: GateSection = field(default_factory=GateSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    # label space of the softmax: "all" classes of the stream or only the "task" block
    train_scope: str = "all"
    eval_scope: str = "all"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(RUN_MODES)}")
        if self.r_per_task < 1:
            raise ConfigError(f"r_per_task must be >= 1, got {self.r_per_task}")
        if self.optim.iters < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.iters must be >= 0 and optim.batch_size >= 1")
        if self.pretrain.steps < 0:
            raise ConfigError("pretrain.steps must be >= 0")
        if any(h < 1 for h in self.arch.hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {self.arch.hidden}")
        for name in ("train_scope", "eval_scope"):
            if getattr(self, name) not in ("all", "task"):
                raise ConfigError(f"{name} must be 'all' or 'task', got {getattr(self, name)!r}")
        self.gate_config()  # raises on bad gate values

    @property
    def gate_mode(self) -> GateMode:
        if self.mode in (DenseVariant.SEQ_LORA.value, DenseVariant.INC_LORA.value):
            return dense_baseline_mode(self.mode).mode
        return GateMode(self.mode)

    @property
    def grow_per_task(self) -> bool:
        if self.mode == DenseVariant.SEQ_LORA.value:
            return dense_baseline_mode(self.mode).grow_per_task
        return True

    def gate_config(self) -> GateConfig:
        return GateConfig(mode=self.gate_mode, **asdict(self.gate))

    def with_(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``with_(**{"gate.tau": 0.5})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)
