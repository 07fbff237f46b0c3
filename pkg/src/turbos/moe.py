"""Mixture-of-experts feed-forward: top-k softmax router, shared expert, capacity accounting."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import silu, softmax_lastdim


class DropPolicy(enum.Enum):
    NO_DROP = "no_drop"
    DROP_TO_CAPACITY = "drop_to_capacity"


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 32
    top_k: int = 2
    n_shared: int = 1
    capacity_factor: float = 1.5
    d_ff: int = 17024
    drop_policy: DropPolicy = DropPolicy.NO_DROP

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]", field="top_k")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive", field="capacity_factor")
        if self.n_shared < 0 or self.d_ff < 1:
            raise ConfigError("bad n_shared / d_ff", field="d_ff")


@dataclass
class ExpertParams:
    gate: np.ndarray  # (..., d_model, d_ff)
    up: np.ndarray  # (..., d_model, d_ff)
    down: np.ndarray  # (..., d_ff, d_model)


@dataclass
class MoeParams:
    router: np.ndarray  # (d_model, n_experts)
    experts: ExpertParams  # stacked over a leading n_experts axis
    shared: ExpertParams  # stacked over a leading n_shared axis


@dataclass
class RoutingDecision:
    indices: np.ndarray  # (T, k) int
    weights: np.ndarray  # (T, k), rows sum to 1
    dropped: np.ndarray  # (T, k) bool

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]


@dataclass
class LoadStats:
    counts: np.ndarray  # (E,) tokens actually processed per expert
    fraction: np.ndarray  # counts / total processed
    max_mean_ratio: float


def init_moe_params(cfg: MoeConfig, d_model: int, rng: np.random.Generator) -> MoeParams:
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def experts(n):
        return ExpertParams(
            gate=uniform((n, d_model, cfg.d_ff), d_model),
            up=uniform((n, d_model, cfg.d_ff), d_model),
            down=uniform((n, cfg.d_ff, d_model), cfg.d_ff),
        )

    return MoeParams(
        router=uniform((d_model, cfg.n_experts), d_model),
        experts=experts(cfg.n_experts),
        shared=experts(cfg.n_shared),
    )


def route_topk(router_logits: np.ndarray, k: int) -> RoutingDecision:
    """Softmax over all experts, keep the k most probable, renormalize.

    Ties go to the lower expert index.
    """
    T, E = router_logits.shape
    if k > E or k < 1:
        raise ConfigError(f"top_k={k} invalid for {E} experts", field="top_k")
    probs = softmax_lastdim(router_logits.astype(np.float64))
    order = np.argsort(-probs, axis=-1, kind="stable")[:, :k]
    sel = np.take_along_axis(probs, order, axis=-1)
    weights = sel / np.sum(sel, axis=-1, keepdims=True)
    return RoutingDecision(
        indices=order,
        weights=weights.astype(router_logits.dtype),
        dropped=np.zeros((T, k), dtype=bool),
    )


def expert_capacity(n_tokens: int, cfg: MoeConfig) -> int:
    """Per-expert token budget ``ceil(gamma * T * k / E)``, evaluated exactly."""
    if n_tokens < 1:
        raise ConfigError("capacity needs at least one token", field="capacity_factor")
    gamma = Fraction(repr(float(cfg.capacity_factor)))
    return max(1, math.ceil(gamma * n_tokens * cfg.top_k / cfg.n_experts))


def apply_capacity(decision: RoutingDecision, cfg: MoeConfig) -> RoutingDecision:
    """Mark assignments over capacity as dropped, first come first served in token order."""
    if cfg.drop_policy is DropPolicy.NO_DROP:
        return RoutingDecision(decision.indices, decision.weights, np.zeros_like(decision.dropped))
    cap = expert_capacity(decision.n_tokens, cfg)
    used = np.zeros(cfg.n_experts, dtype=np.int64)
    dropped = np.zeros_like(decision.dropped)
    for t in range(decision.n_tokens):
        for j, e in enumerate(decision.indices[t]):
            if used[e] >= cap:
                dropped[t, j] = True
            else:
                used[e] += 1
    return RoutingDecision(decision.indices, decision.weights, dropped)


def expert_ffn(p: ExpertParams, i: int, x: np.ndarray) -> np.ndarray:
    return (silu(x @ p.gate[i]) * (x @ p.up[i])) @ p.down[i]


def route(cfg: MoeConfig, params: MoeParams, x: np.ndarray) -> RoutingDecision:
    return apply_capacity(route_topk(x @ params.router, cfg.top_k), cfg)


def moe_forward(cfg: MoeConfig, params: MoeParams, x: np.ndarray) -> np.ndarray:
    """Shared experts plus the weighted top-k routed experts. No residual add."""
    if x.ndim != 2 or x.shape[1] != params.router.shape[0]:
        raise DimensionError(f"moe input {x.shape} does not match d_model={params.router.shape[0]}")
    if params.router.shape[1] != cfg.n_experts:
        raise DimensionError("router width differs from n_experts")
    decision = route(cfg, params, x)
    y = np.zeros_like(x)
    for i in range(cfg.n_shared):
        y += expert_ffn(params.shared, i, x)
    keep = ~decision.dropped
    for e in range(cfg.n_experts):
        tok, slot = np.nonzero((decision.indices == e) & keep)
        if tok.size == 0:
            continue
        w = decision.weights[tok, slot][:, None]
        y[tok] += w * expert_ffn(params.experts, e, x[tok])
    return y


def moe_dense_reference(cfg: MoeConfig, params: MoeParams, x: np.ndarray) -> np.ndarray:
    """Evaluate every expert on every token (float64) and zero-mask the unselected ones."""
    f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    xf = f(x)
    T = x.shape[0]
    logits = xf @ f(params.router)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    mask = np.zeros((T, cfg.n_experts))
    for t in range(T):
        chosen = sorted(range(cfg.n_experts), key=lambda e: (-probs[t, e], e))[: cfg.top_k]
        tot = sum(probs[t, e] for e in chosen)
        for e in chosen:
            mask[t, e] = probs[t, e] / tot
    if cfg.drop_policy is DropPolicy.DROP_TO_CAPACITY:
        cap = expert_capacity(T, cfg)
        used = [0] * cfg.n_experts
        for t in range(T):
            for e in sorted(range(cfg.n_experts), key=lambda e: (-probs[t, e], e))[: cfg.top_k]:
                if used[e] >= cap:
                    mask[t, e] = 0.0
                else:
                    used[e] += 1

    def ffn(p, i):
        g = xf @ f(p.gate[i])
        return ((g / (1.0 + np.exp(-g))) * (xf @ f(p.up[i]))) @ f(p.down[i])

    y = sum((ffn(params.shared, i) for i in range(cfg.n_shared)), np.zeros_like(xf))
    for e in range(cfg.n_experts):
        y += mask[:, e : e + 1] * ffn(params.experts, e)
    return y


def load_balance_stats(decisions: RoutingDecision | list[RoutingDecision], n_experts: int) -> LoadStats:
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    counts = np.zeros(n_experts, dtype=np.int64)
    for d in decisions:
        np.add.at(counts, d.indices[~d.dropped], 1)
    total = counts.sum()
    fraction = counts / total if total else np.zeros(n_experts)
    mean = total / n_experts
    return LoadStats(counts=counts, fraction=fraction, max_mean_ratio=float(counts.max() / mean) if mean else 0.0)
