"""Self-activated sparse mixture of rank-1 adapters for continual learning."""

from rankmix.gate import GateConfig, GateMode, GateTrace, gate_pipeline
from rankmix.adapter import AdaptedLinear, RankPool, RankUnit, adapter_backward, adapter_forward

__all__ = [
    "AdaptedLinear",
    "GateConfig",
    "GateMode",
    "GateTrace",
    "RankPool",
    "RankUnit",
    "adapter_backward",
    "adapter_forward",
    "gate_pipeline",
]

__version__ = "0.1.0"
