"""Grouped-query attention with a KV cache, per-head QK RMS norm and NTK-scaled RoPE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, ConfigError, DimensionError
from .numerics import DEFAULT_EPS, rmsnorm, softmax_lastdim


@dataclass(frozen=True)
class RopeConfig:
    d_head: int
    base: float = 10000.0
    ntk_alpha: float = 1.0

    def __post_init__(self):
        if self.d_head % 2:
            raise ConfigError("rotary dimension must be even", field="d_head")
        if self.ntk_alpha < 1:
            raise ConfigError("ntk_alpha must be >= 1", field="ntk_alpha")


@dataclass(frozen=True)
class AttnConfig:
    n_q_heads: int
    n_kv_heads: int
    d_head: int
    rope: RopeConfig
    use_qk_norm: bool = True

    def __post_init__(self):
        if self.n_kv_heads < 1 or self.n_q_heads % self.n_kv_heads:
            raise ConfigError("n_q_heads must be a multiple of n_kv_heads", field="n_kv_heads")
        if self.rope.d_head != self.d_head:
            raise ConfigError("rope dimension must equal d_head", field="d_head")

    def kv_head(self, q_head: int) -> int:
        return q_head * self.n_kv_heads // self.n_q_heads

    def kv_map(self) -> list[int]:
        return [self.kv_head(h) for h in range(self.n_q_heads)]


@dataclass
class AttnParams:
    wq: np.ndarray  # (d_model, n_q * d_head)
    wk: np.ndarray  # (d_model, n_kv * d_head)
    wv: np.ndarray  # (d_model, n_kv * d_head)
    wo: np.ndarray  # (n_q * d_head, d_model)
    q_norm: np.ndarray  # (d_head,)
    k_norm: np.ndarray  # (d_head,)


def init_attn_params(cfg: AttnConfig, d_model: int, rng: np.random.Generator) -> AttnParams:
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    dq, dkv = cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    return AttnParams(
        wq=uniform((d_model, dq), d_model),
        wk=uniform((d_model, dkv), d_model),
        wv=uniform((d_model, dkv), d_model),
        wo=uniform((dq, d_model), dq),
        q_norm=np.ones(cfg.d_head, dtype=np.float32),
        k_norm=np.ones(cfg.d_head, dtype=np.float32),
    )


class KvCache:
    """Append-only key/value store for one attention layer of one sequence.

    Only ``n_kv_heads`` heads are stored, so a token costs
    ``2 * n_kv_heads * d_head`` floats regardless of the query head count.
    """

    def __init__(self, n_kv_heads: int, d_head: int, capacity: int = 64):
        self.n_kv_heads = n_kv_heads
        self.d_head = d_head
        self.length = 0
        self._k = np.zeros((capacity, n_kv_heads, d_head), dtype=np.float32)
        self._v = np.zeros_like(self._k)

    @property
    def keys(self) -> np.ndarray:
        return self._k[: self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[: self.length]

    @property
    def floats_per_token(self) -> int:
        return self._k[0].size + self._v[0].size

    def stored_floats(self) -> int:
        return self.keys.size + self.values.size

    def append(self, k: np.ndarray, v: np.ndarray, start: int) -> None:
        if start != self.length:
            raise CacheError(f"cache holds positions [0, {self.length}) but write starts at {start}")
        if k.shape != v.shape or k.shape[1:] != (self.n_kv_heads, self.d_head):
            raise CacheError(f"k/v shapes {k.shape}/{v.shape} do not fit the cache")
        end = self.length + k.shape[0]
        if end > self._k.shape[0]:
            cap = max(end, 2 * self._k.shape[0])
            for name in ("_k", "_v"):
                old = getattr(self, name)
                grown = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
                grown[: self.length] = old[: self.length]
                setattr(self, name, grown)
        self._k[self.length : end] = k
        self._v[self.length : end] = v
        self.length = end

    def copy(self) -> KvCache:
        other = KvCache(self.n_kv_heads, self.d_head, capacity=max(self.length, 1))
        other.append(self.keys.copy(), self.values.copy(), 0)
        return other


def ntk_rope_base(cfg: RopeConfig) -> float:
    """Rotary base rescaled for context extension: ``base * alpha^(d / (d - 2))``."""
    d = cfg.d_head
    if d <= 2:
        raise ConfigError("NTK scaling needs d_head > 2", field="d_head")
    return cfg.base * cfg.ntk_alpha ** (d / (d - 2))


def rope_frequencies(cfg: RopeConfig) -> np.ndarray:
    base = ntk_rope_base(cfg)
    return base ** (-np.arange(0, cfg.d_head, 2, dtype=np.float64) / cfg.d_head)


def apply_rope(x: np.ndarray, positions, cfg: RopeConfig) -> np.ndarray:
    """Rotate (T, H, d_head) vectors; pair ``i`` is ``(x[i], x[i + d/2])``."""
    positions = np.asarray(positions)
    if x.shape[-1] != cfg.d_head or x.shape[0] != positions.shape[0]:
        raise DimensionError(f"rope input {x.shape} vs positions {positions.shape}, d_head {cfg.d_head}")
    if np.any(positions < 0):
        raise DimensionError("positions must be non-negative")
    ang = positions.astype(np.float64)[:, None] * rope_frequencies(cfg)[None, :]
    cos = np.cos(ang)[:, None, :].astype(x.dtype)
    sin = np.sin(ang)[:, None, :].astype(x.dtype)
    half = cfg.d_head // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def qk_norm(q: np.ndarray, k: np.ndarray, q_gain: np.ndarray, k_gain: np.ndarray, eps: float = DEFAULT_EPS):
    return rmsnorm(q, q_gain, eps), rmsnorm(k, k_gain, eps)


def _project_qkv(cfg: AttnConfig, params: AttnParams, u: np.ndarray, positions: np.ndarray, eps: float):
    T = u.shape[0]
    q = (u @ params.wq).reshape(T, cfg.n_q_heads, cfg.d_head)
    k = (u @ params.wk).reshape(T, cfg.n_kv_heads, cfg.d_head)
    v = (u @ params.wv).reshape(T, cfg.n_kv_heads, cfg.d_head)
    if cfg.use_qk_norm:
        q, k = qk_norm(q, k, params.q_norm, params.k_norm, eps)
    return apply_rope(q, positions, cfg.rope), apply_rope(k, positions, cfg.rope), v


def _check_residual(residual_in: np.ndarray, params: AttnParams) -> None:
    if residual_in.ndim != 2 or residual_in.shape[0] < 1 or residual_in.shape[1] != params.wq.shape[0]:
        raise DimensionError(f"residual {residual_in.shape} does not match d_model={params.wq.shape[0]}")


def causal_weights(q: np.ndarray, keys: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Softmax(q k^T / sqrt(d)) with key ``s`` masked for queries at positions < s.

    ``q`` (T, H, d) and ``keys`` (S, H, d) with keys at positions 0..S-1.
    Returns (H, T, S).
    """
    d = q.shape[-1]
    scores = np.einsum("thd,shd->hts", q, keys) / np.sqrt(d).astype(q.dtype)
    mask = np.arange(keys.shape[0])[None, :] > positions[:, None]
    return softmax_lastdim(np.where(mask[None], -np.inf, scores))


def gqa_prefill(
    cfg: AttnConfig,
    params: AttnParams,
    residual_in: np.ndarray,
    cache: KvCache,
    *,
    start_pos: int | None = None,
    norm_gain: np.ndarray | None = None,
    eps: float = DEFAULT_EPS,
):
    """Causal attention over cached plus new positions. ``cache`` is extended in place and returned."""
    _check_residual(residual_in, params)
    start = cache.length if start_pos is None else start_pos
    if start != cache.length:
        raise CacheError(f"new positions start at {start} but the cache ends at {cache.length}")
    T = residual_in.shape[0]
    u = residual_in if norm_gain is None else rmsnorm(residual_in, norm_gain, eps)
    pos = np.arange(start, start + T)
    q, k, v = _project_qkv(cfg, params, u, pos, eps)
    cache.append(k, v, start)
    kv = cfg.kv_map()
    K = cache.keys[:, kv]  # (S, n_q, d)
    V = cache.values[:, kv]
    attn = causal_weights(q, K, pos)
    out = np.einsum("hts,shd->thd", attn, V).reshape(T, -1)
    return (residual_in + out @ params.wo).astype(residual_in.dtype, copy=False), cache


def gqa_decode_step(
    cfg: AttnConfig,
    params: AttnParams,
    residual_in: np.ndarray,
    cache: KvCache,
    *,
    norm_gain: np.ndarray | None = None,
    eps: float = DEFAULT_EPS,
):
    """One new position attending to everything cached so far."""
    _check_residual(residual_in, params)
    if residual_in.shape[0] != 1:
        raise DimensionError("decode takes exactly one position")
    u = residual_in if norm_gain is None else rmsnorm(residual_in, norm_gain, eps)
    q, k, v = _project_qkv(cfg, params, u, np.array([cache.length]), eps)
    cache.append(k, v, cache.length)
    group = cfg.n_q_heads // cfg.n_kv_heads
    # (n_kv, group, d) queries against (n_kv, S, d) keys
    qg = q[0].reshape(cfg.n_kv_heads, group, cfg.d_head)
    K = cache.keys.transpose(1, 0, 2)
    V = cache.values.transpose(1, 0, 2)
    scores = qg @ K.transpose(0, 2, 1) / np.sqrt(cfg.d_head).astype(q.dtype)
    out = softmax_lastdim(scores) @ V  # (n_kv, group, d)
    return (residual_in + out.reshape(1, -1) @ params.wo).astype(residual_in.dtype, copy=False), cache


def attention_reference(cfg: AttnConfig, params: AttnParams, residual_in, *, norm_gain=None, eps=DEFAULT_EPS):
    """Float64, per-head, per-position attention with explicit rotations.

    With ``n_kv_heads == n_q_heads`` this is plain multi-head attention.
    """
    f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    r = f(residual_in)
    T = r.shape[0]
    d = cfg.d_head

    def norm(vec, gain):
        return vec / math.sqrt(float(np.mean(vec * vec)) + eps) * f(gain)

    def rotate(vec, pos):
        base = cfg.rope.base * cfg.rope.ntk_alpha ** (d / (d - 2))
        out = vec.copy()
        for i in range(d // 2):
            theta = pos * base ** (-2 * i / d)
            a, b = vec[i], vec[i + d // 2]
            out[i] = a * math.cos(theta) - b * math.sin(theta)
            out[i + d // 2] = a * math.sin(theta) + b * math.cos(theta)
        return out

    u = r if norm_gain is None else np.stack([norm(row, norm_gain) for row in r])
    Q = (u @ f(params.wq)).reshape(T, cfg.n_q_heads, d)
    Kf = (u @ f(params.wk)).reshape(T, cfg.n_kv_heads, d)
    Vf = (u @ f(params.wv)).reshape(T, cfg.n_kv_heads, d)
    heads = np.zeros((T, cfg.n_q_heads, d))
    for h in range(cfg.n_q_heads):
        g = h * cfg.n_kv_heads // cfg.n_q_heads
        for t in range(T):
            qv = Q[t, h]
            if cfg.use_qk_norm:
                qv = norm(qv, params.q_norm)
            qv = rotate(qv, t)
            logits = []
            for s in range(t + 1):
                kv = Kf[s, g]
                if cfg.use_qk_norm:
                    kv = norm(kv, params.k_norm)
                logits.append(float(qv @ rotate(kv, s)) / math.sqrt(d))
            m = max(logits)
            w = [math.exp(z - m) for z in logits]
            tot = sum(w)
            heads[t, h] = sum(wi / tot * Vf[s, g] for s, wi in enumerate(w))
    return r + heads.reshape(T, -1) @ f(params.wo)
