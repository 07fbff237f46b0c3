"""Closed-form FLOP counts per layer kind (a multiply-add counts as 2).

Counts are exact Python integers and depend only on the config and sequence
length. The Mamba count follows the recurrent form, which is linear in T; the
attention count includes the causal score/value mixing, which is quadratic.
"""

from __future__ import annotations

from .model import LayerKind, ModelConfig


def mamba_token_flops(cfg: ModelConfig) -> int:
    s = cfg.ssd_config()
    hpn = s.n_heads * s.d_head * s.d_state
    return (
        2 * cfg.d_model * s.d_in_proj  # in projection
        + 2 * s.conv_width * s.conv_dim  # depthwise conv
        + s.d_inner  # dt * x
        + 3 * hpn  # decay, outer product, accumulate
        + 2 * hpn  # read-out H C
        + 2 * s.d_inner  # D skip
        + s.d_inner  # gate
        + 2 * s.d_inner * cfg.d_model  # out projection
    )


def attention_proj_flops(cfg: ModelConfig) -> int:
    dq = cfg.n_q_heads * cfg.d_head
    dkv = cfg.n_kv_heads * cfg.d_head
    return 2 * cfg.d_model * (dq + 2 * dkv) + 2 * dq * cfg.d_model


def attention_pair_flops(cfg: ModelConfig) -> int:
    # q.k and weighted v, per query head, per (query, key) pair
    return 4 * cfg.n_q_heads * cfg.d_head


def ffn_token_flops(cfg: ModelConfig) -> int:
    active = cfg.top_k + 1  # routed + shared
    return 2 * cfg.d_model * cfg.n_experts + active * 3 * 2 * cfg.d_model * cfg.d_ff


def prefill_flops(cfg: ModelConfig, kind: LayerKind, seq_len: int) -> int:
    if kind is LayerKind.MAMBA:
        return seq_len * mamba_token_flops(cfg)
    if kind is LayerKind.ATTENTION:
        pairs = seq_len * (seq_len + 1) // 2
        return seq_len * attention_proj_flops(cfg) + pairs * attention_pair_flops(cfg)
    return seq_len * ffn_token_flops(cfg)


def decode_flops(cfg: ModelConfig, kind: LayerKind, cache_len: int) -> int:
    """Cost of one new token when ``cache_len`` positions precede it."""
    if kind is LayerKind.MAMBA:
        return mamba_token_flops(cfg)
    if kind is LayerKind.ATTENTION:
        return attention_proj_flops(cfg) + (cache_len + 1) * attention_pair_flops(cfg)
    return ffn_token_flops(cfg)
