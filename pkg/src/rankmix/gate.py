"""Self-activated rank gating.

Each rank-1 unit scores its own relevance from its key activation
``a_i = A_i . x``. The canonical pipeline is

    s = a / sqrt(sum(a**2) + eps)          # normalized scores
    z = s where i in top-k(s) else -inf   # activation budget
    w = softmax(z / tau)                  # temperature mixture
    w = w * (s >= delta)                  # threshold pruning, no renormalization

The modes trim this pipeline to reproduce the mixture-strategy ablation rows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from rankmix.errors import ConfigError, DimensionError, WrongMode
from rankmix.numerics import NEG_INF, as_matrix, as_vector, softmax_rows, topk_mask_rows


class GateMode(str, enum.Enum):
    DENSE = "Dense"
    ROUTER_LORA = "RouterLoRA"
    ROUTER_RANK = "RouterRank"
    SELF_RAW = "SelfRaw"
    SELF_SPARSE = "SelfSparse"
    SELF_ADAPTIVE = "SelfAdaptive"

    @property
    def is_router(self) -> bool:
        return self in (GateMode.ROUTER_LORA, GateMode.ROUTER_RANK)

    @property
    def is_self(self) -> bool:
        return self in (GateMode.SELF_RAW, GateMode.SELF_SPARSE, GateMode.SELF_ADAPTIVE)


RAW_WEIGHT_VARIANTS = ("softmax", "scores")


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.1
    budget_k: int = 16
    delta: float = 0.2
    eps: float = 1e-12
    mode: GateMode = GateMode.SELF_ADAPTIVE
    # SelfRaw sub-variant: "softmax" = softmax(s) over all ranks at tau=1,
    # "scores" = use s itself as the mixture weights.
    raw_weights: str = "softmax"
    # number of whole experts kept by the RouterLoRA baseline
    router_k: int = 2
    # freeze the router columns of earlier tasks when new ones are added
    router_freeze_old: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", GateMode(self.mode))
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if int(self.budget_k) != self.budget_k or self.budget_k < 1:
            raise ConfigError(f"budget_k must be an integer >= 1, got {self.budget_k}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if not self.delta >= 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.raw_weights not in RAW_WEIGHT_VARIANTS:
            raise ConfigError(f"raw_weights must be one of {RAW_WEIGHT_VARIANTS}, got {self.raw_weights!r}")
        if int(self.router_k) != self.router_k or self.router_k < 1:
            raise ConfigError(f"router_k must be an integer >= 1, got {self.router_k}")

    def with_(self, **changes) -> "GateConfig":
        return replace(self, **changes)


@dataclass
class GateTrace:
    """Per-input record of every intermediate of the gate."""

    activations_a: np.ndarray
    norm_n: float
    raw_scores_s: np.ndarray
    topk_set: np.ndarray
    softmax_w: np.ndarray
    prune_mask_m: np.ndarray
    final_w: np.ndarray
    mode: GateMode = GateMode.SELF_ADAPTIVE
    tau: float = 1.0
    # SelfRaw "scores" variant: final_w is s itself, no softmax in between
    direct_scores: bool = False

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.final_w)

    def to_record(self) -> dict:
        return {
            "mode": self.mode.value,
            "tau": self.tau,
            "a": self.activations_a.tolist(),
            "n": self.norm_n,
            "s": self.raw_scores_s.tolist(),
            "topk": self.topk_set.tolist(),
            "softmax_w": self.softmax_w.tolist(),
            "m": self.prune_mask_m.astype(int).tolist(),
            "w": self.final_w.tolist(),
            "direct": self.direct_scores,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GateTrace":
        return cls(
            activations_a=np.asarray(rec["a"], dtype=np.float64),
            norm_n=float(rec["n"]),
            raw_scores_s=np.asarray(rec["s"], dtype=np.float64),
            topk_set=np.asarray(rec["topk"], dtype=np.int64),
            softmax_w=np.asarray(rec["softmax_w"], dtype=np.float64),
            prune_mask_m=np.asarray(rec["m"], dtype=bool),
            final_w=np.asarray(rec["w"], dtype=np.float64),
            mode=GateMode(rec["mode"]),
            tau=float(rec["tau"]),
            direct_scores=bool(rec.get("direct", False)),
        )


@dataclass
class GateBatch:
    """Row-stacked gate intermediates for a batch of inputs (rows)."""

    a: np.ndarray  # (B, r)
    n: np.ndarray  # (B,)
    s: np.ndarray  # (B, r)
    topk_mask: np.ndarray  # (B, r) bool
    softmax_w: np.ndarray  # (B, r)
    prune_mask: np.ndarray  # (B, r) bool
    final_w: np.ndarray  # (B, r)
    mode: GateMode
    tau: float
    direct_scores: bool = False

    def __len__(self) -> int:
        return self.a.shape[0]

    def trace(self, i: int) -> GateTrace:
        return GateTrace(
            activations_a=self.a[i].copy(),
            norm_n=float(self.n[i]),
            raw_scores_s=self.s[i].copy(),
            topk_set=np.flatnonzero(self.topk_mask[i]),
            softmax_w=self.softmax_w[i].copy(),
            prune_mask_m=self.prune_mask[i].copy(),
            final_w=self.final_w[i].copy(),
            mode=self.mode,
            tau=self.tau,
            direct_scores=self.direct_scores,
        )

    @classmethod
    def from_trace(cls, tr: GateTrace) -> "GateBatch":
        r = tr.raw_scores_s.shape[0]
        topk = np.zeros((1, r), dtype=bool)
        topk[0, tr.topk_set] = True
        return cls(
            a=tr.activations_a[None, :],
            n=np.array([tr.norm_n]),
            s=tr.raw_scores_s[None, :],
            topk_mask=topk,
            softmax_w=tr.softmax_w[None, :],
            prune_mask=tr.prune_mask_m[None, :],
            final_w=tr.final_w[None, :],
            mode=tr.mode,
            tau=tr.tau,
            direct_scores=tr.direct_scores,
        )


def raw_scores_rows(keys: np.ndarray, xs: np.ndarray, eps: float):
    a = xs @ keys.T
    n = np.sqrt(np.sum(a * a, axis=1) + eps)
    return a, n, a / n[:, None]


def raw_scores(keys, x, eps: float = 1e-12):
    """Key activations, their guarded l2 norm, and the normalized scores."""
    keys = as_matrix(keys, "keys")
    x = as_vector(x, "x")
    if keys.shape[1] != x.shape[0]:
        raise DimensionError(f"keys have {keys.shape[1]} cols but x has length {x.shape[0]}")
    a, n, s = raw_scores_rows(keys, x[None, :], eps)
    return a[0], float(n[0]), s[0]


def apply_budget(s, k: int) -> np.ndarray:
    s = as_vector(s, "s")
    keep = topk_mask_rows(s[None, :], k)[0]
    return np.where(keep, s, NEG_INF)


def gate_weights(masked_s, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    z = as_vector(masked_s, "masked_s")
    return softmax_rows(z[None, :] / tau)[0]


def prune(w, s, delta: float) -> np.ndarray:
    w = as_vector(w, "w")
    s = as_vector(s, "s")
    if w.shape != s.shape:
        raise DimensionError(f"prune: w has length {w.shape[0]} but s has length {s.shape[0]}")
    return np.where(s >= delta, w, 0.0)


def mix_scores_rows(s: np.ndarray, cfg: GateConfig):
    """Budget, temperature softmax and pruning applied to each row of scores.

    Returns ``(topk_mask, softmax_w, prune_mask, final_w, tau_used)``.
    """
    mode = cfg.mode
    if mode.is_router:
        raise WrongMode(f"{mode.value} gating is produced by a learned router, not by self-activation")
    everything = np.ones(s.shape, dtype=bool)
    if mode is GateMode.DENSE:
        ones = np.ones(s.shape)
        return everything, ones, everything, ones.copy(), 1.0
    if mode is GateMode.SELF_RAW:
        if cfg.raw_weights == "scores":
            return everything, s.copy(), everything, s.copy(), 1.0
        w = softmax_rows(s)
        return everything, w, everything, w.copy(), 1.0

    topk = topk_mask_rows(s, cfg.budget_k)
    w = softmax_rows(np.where(topk, s, NEG_INF) / cfg.tau)
    if mode is GateMode.SELF_SPARSE:
        return topk, w, everything, w.copy(), cfg.tau
    keep = s >= cfg.delta
    return topk, w, keep, np.where(keep, w, 0.0), cfg.tau


def gate_rows(keys: np.ndarray, xs: np.ndarray, cfg: GateConfig) -> GateBatch:
    a, n, s = raw_scores_rows(keys, xs, cfg.eps)
    topk, w, m, final, tau = mix_scores_rows(s, cfg)
    direct = cfg.mode is GateMode.SELF_RAW and cfg.raw_weights == "scores"
    return GateBatch(a=a, n=n, s=s, topk_mask=topk, softmax_w=w, prune_mask=m, final_w=final,
                     mode=cfg.mode, tau=tau, direct_scores=direct)


def gate_pipeline(keys, x, cfg: GateConfig) -> GateTrace:
    keys = as_matrix(keys, "keys")
    x = as_vector(x, "x")
    if keys.shape[1] != x.shape[0]:
        raise DimensionError(f"keys have {keys.shape[1]} cols but x has length {x.shape[0]}")
    return gate_rows(keys, x[None, :], cfg).trace(0)


def entropy(w) -> float:
    """Shannon entropy (nats) of the nonnegative weights normalized to sum 1."""
    w = np.abs(np.asarray(w, dtype=np.float64))
    total = w.sum()
    if total == 0:
        return 0.0
    p = w[w > 0] / total
    return float(-np.sum(p * np.log(p)))


def scores_margin(s: np.ndarray, cfg: GateConfig) -> float:
    """Distance of the scores from the nearest top-k or threshold decision boundary."""
    s = np.asarray(s, dtype=np.float64)
    margin = math.inf
    if cfg.mode in (GateMode.SELF_SPARSE, GateMode.SELF_ADAPTIVE) and cfg.budget_k < s.size:
        srt = np.sort(s)[::-1]
        margin = min(margin, float(srt[cfg.budget_k - 1] - srt[cfg.budget_k]))
    if cfg.mode is GateMode.SELF_ADAPTIVE:
        margin = min(margin, float(np.min(np.abs(s - cfg.delta))))
    return margin
