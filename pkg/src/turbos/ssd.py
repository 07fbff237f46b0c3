"""Mamba2 state-space layer: recurrence oracle, chunked prefill scan, decode update.

Shapes (no batch axis):

    A        (H,)          negative per-head decay rate
    dt       (T, H)        positive step sizes
    x        (T, H, P)     P = d_head
    B, C     (T, G, N)     N = d_state, G groups shared by H // G heads each
    D        (H,)          skip scale
    state    (H, P, N)

Recurrence per head: ``H_t = exp(dt_t A) H_{t-1} + (dt_t x_t) outer B_t`` and
``y_t = H_t C_t + D x_t``. The recurrent state is always held in float32 (or
wider); ``Precision.BF16EMU`` exists only to show what narrower state does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .numerics import DEFAULT_EPS, Precision, decay_matrix, rmsnorm, round_bf16, silu, softplus


@dataclass(frozen=True)
class SsdConfig:
    n_heads: int
    d_head: int
    d_state: int
    n_groups: int = 1
    chunk_size: int = 128
    conv_width: int = 4  # 0 disables the causal conv (and its silu)

    def __post_init__(self):
        for name in ("n_heads", "d_head", "d_state", "n_groups", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if self.n_heads % self.n_groups:
            raise ConfigError("n_heads must be divisible by n_groups", field="ssm_groups")
        if self.conv_width < 0:
            raise ConfigError("conv_width must be >= 0", field="conv_width")

    @property
    def d_inner(self) -> int:
        return self.n_heads * self.d_head

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.n_groups * self.d_state

    @property
    def d_in_proj(self) -> int:
        # columns: z | x | B | C | dt
        return 2 * self.d_inner + 2 * self.n_groups * self.d_state + self.n_heads


@dataclass
class SsdLayerParams:
    in_proj: np.ndarray  # (d_model, d_in_proj)
    conv_weight: np.ndarray  # (conv_width, conv_dim), depthwise
    conv_bias: np.ndarray  # (conv_dim,)
    dt_bias: np.ndarray  # (H,)
    A_log: np.ndarray  # (H,), A = -exp(A_log)
    D: np.ndarray  # (H,)
    out_proj: np.ndarray  # (d_inner, d_model)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)


@dataclass
class SsmState:
    """Recurrent state of one Mamba layer for one sequence."""

    h: np.ndarray  # (H, P, N), float32
    conv: np.ndarray | None = field(default=None)  # last conv_width - 1 inputs of the conv stream

    @classmethod
    def zeros(cls, cfg: SsdConfig) -> SsmState:
        return cls(
            h=np.zeros((cfg.n_heads, cfg.d_head, cfg.d_state), dtype=np.float32),
            conv=np.zeros((max(cfg.conv_width - 1, 0), cfg.conv_dim), dtype=np.float32),
        )


def init_ssd_params(cfg: SsdConfig, d_model: int, rng: np.random.Generator) -> SsdLayerParams:
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    # dt in [1e-3, 1e-1] after softplus, log-uniformly
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=cfg.n_heads))
    return SsdLayerParams(
        in_proj=uniform((d_model, cfg.d_in_proj), d_model),
        conv_weight=uniform((cfg.conv_width, cfg.conv_dim), max(cfg.conv_width, 1)),
        conv_bias=uniform((cfg.conv_dim,), max(cfg.conv_width, 1)),
        dt_bias=(dt + np.log(-np.expm1(-dt))).astype(np.float32),
        A_log=np.log(rng.uniform(1.0, 16.0, size=cfg.n_heads)).astype(np.float32),
        D=np.ones(cfg.n_heads, dtype=np.float32),
        out_proj=uniform((cfg.d_inner, d_model), cfg.d_inner),
    )


def expand_groups(bc: np.ndarray, n_heads: int) -> np.ndarray:
    """(T, G, N) -> (T, H, N); head h reads group h // (H // G)."""
    g = bc.shape[-2]
    if n_heads % g:
        raise DimensionError(f"{n_heads} heads cannot share {g} groups")
    return np.repeat(bc, n_heads // g, axis=-2)


def _check_scan_shapes(A, dt, x, B, C, D, h0):
    if x.ndim != 3:
        raise DimensionError(f"x must be (T, H, P), got {x.shape}")
    t, h, p = x.shape
    if dt.shape != (t, h) or A.shape != (h,) or D.shape != (h,):
        raise DimensionError(f"dt {dt.shape}, A {A.shape}, D {D.shape} do not match x {x.shape}")
    if B.shape != C.shape or B.ndim != 3 or B.shape[0] != t:
        raise DimensionError(f"B {B.shape} / C {C.shape} do not match T={t}")
    if h0 is not None and h0.shape != (h, p, B.shape[2]):
        raise DimensionError(f"initial state {h0.shape} != {(h, p, B.shape[2])}")


def ssd_naive_scan(A, dt, x, B, C, D, h0=None, *, precision: Precision = Precision.F64):
    """Step-by-step recurrence. The slow oracle for every other scan path.

    With ``Precision.BF16EMU`` arithmetic runs in float32 and the state is
    rounded to bfloat16 after every write.
    """
    _check_scan_shapes(A, dt, x, B, C, D, h0)
    dtype = precision.dtype
    A, dt, x, D = (np.asarray(v, dtype=dtype) for v in (A, dt, x, D))
    n_heads = x.shape[1]
    Bh = expand_groups(np.asarray(B, dtype=dtype), n_heads)
    Ch = expand_groups(np.asarray(C, dtype=dtype), n_heads)
    T, H, P = x.shape
    state = np.zeros((H, P, Bh.shape[2]), dtype=dtype) if h0 is None else precision.store(h0)
    y = np.empty_like(x)
    for t in range(T):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below with the step index
            alpha = np.exp(dt[t] * A)
            state = alpha[:, None, None] * state + (dt[t][:, None] * x[t])[:, :, None] * Bh[t][:, None, :]
        if precision is Precision.BF16EMU:
            state = round_bf16(state)
        if not np.all(np.isfinite(state)):
            raise NumericError("non-finite state in naive scan", step=t)
        y[t] = np.einsum("hpn,hn->hp", state, Ch[t]) + D[:, None] * x[t]
    return y, state


def ssd_chunked_scan(A, dt, x, B, C, D, h0=None, *, chunk_size: int = 128):
    """Block-wise scan used for prefill.

    Within each chunk the outputs are a masked (C B^T * decay) product applied
    to ``dt * x``; across chunks only the (H, P, N) state is carried, scaled by
    the chunk's total decay. The last chunk may be shorter than ``chunk_size``.
    """
    _check_scan_shapes(A, dt, x, B, C, D, h0)
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1", field="chunk_size")
    dtype = np.result_type(x.dtype, np.float32)
    T, H, P = x.shape
    Bh = expand_groups(B.astype(dtype, copy=False), H)
    Ch = expand_groups(C.astype(dtype, copy=False), H)
    log_a = (dt * A).astype(dtype, copy=False)  # (T, H)
    xdt = (x * dt[:, :, None]).astype(dtype, copy=False)
    state_dtype = np.result_type(dtype, np.float32)
    state = (
        np.zeros((H, P, Bh.shape[2]), dtype=state_dtype)
        if h0 is None
        else np.array(h0, dtype=state_dtype)
    )
    y = np.empty((T, H, P), dtype=dtype)

    for start in range(0, T, chunk_size):
        sl = slice(start, min(start + chunk_size, T))
        la = log_a[sl].T  # (H, L)
        xc = xdt[sl].transpose(1, 0, 2)  # (H, L, P)
        bc = Bh[sl].transpose(1, 0, 2)  # (H, L, N)
        cc = Ch[sl].transpose(1, 0, 2)
        L = decay_matrix(la)  # (H, L, L)
        scores = (cc @ bc.transpose(0, 2, 1)) * L
        y_diag = scores @ xc  # (H, L, P)
        decay_in = np.exp(np.cumsum(la, axis=-1))  # decay from chunk start through step i
        y_off = (cc @ state.transpose(0, 2, 1).astype(dtype)) * decay_in[:, :, None]
        y[sl] = (y_diag + y_off).transpose(1, 0, 2)
        # decay from step j (exclusive) to the chunk end is the last row of L
        decay_out = L[:, -1, :]
        chunk_state = (xc * decay_out[:, :, None]).transpose(0, 2, 1) @ bc  # (H, P, N)
        decay_chunk = np.exp(np.sum(la, axis=-1))
        state = decay_chunk[:, None, None] * state + chunk_state

    if not np.all(np.isfinite(state)):
        raise NumericError("non-finite state in chunked scan", step=T - 1)
    y += (D[:, None] * x).astype(dtype)
    return y, state


def ssd_decode_step(A, D, h, x_t, dt_t, B_t, C_t, *, state_precision: Precision = Precision.F32):
    """Single-position selective state update.

    ``x_t`` (H, P), ``dt_t`` (H,), ``B_t``/``C_t`` (G, N). State arithmetic runs
    in ``state_precision`` (float32 by default) whatever the activation dtype.
    Returns ``(y_t, h')`` with ``y_t`` in the activation dtype.
    """
    act_dtype = np.asarray(x_t).dtype
    sdt = state_precision.dtype
    H = x_t.shape[0]
    if h.shape[0] != H or x_t.shape[1] != h.shape[1]:
        raise DimensionError(f"state {h.shape} does not match x_t {x_t.shape}")
    b = expand_groups(np.asarray(B_t, dtype=sdt)[None], H)[0]
    c = expand_groups(np.asarray(C_t, dtype=sdt)[None], H)[0]
    dt_s = np.asarray(dt_t, dtype=sdt)
    x_s = np.asarray(x_t, dtype=sdt)
    alpha = np.exp(dt_s * np.asarray(A, dtype=sdt))
    h_new = alpha[:, None, None] * np.asarray(h, dtype=sdt) + (dt_s[:, None] * x_s)[:, :, None] * b[:, None, :]
    if state_precision is Precision.BF16EMU:
        h_new = round_bf16(h_new)
    if not np.all(np.isfinite(h_new)):
        raise NumericError("non-finite state in decode step")
    y = np.einsum("hpn,hn->hp", h_new, c) + np.asarray(D, dtype=sdt)[:, None] * x_s
    return y.astype(act_dtype), h_new


def total_decay(A, dt) -> np.ndarray:
    """Product of all per-step decays over the sequence, per head: (H,)."""
    return np.exp(np.sum(dt * A, axis=0))


def initial_state_readout(A, dt, C, h0) -> np.ndarray:
    """Output contribution of an initial state: ``exp(sum_{k<=t} dt_k A) h0 C_t``.

    The scan is linear in its initial state, so a scan started from zero plus
    this term equals the scan started from ``h0``.
    """
    H = dt.shape[1]
    cum = np.exp(np.cumsum(dt * A, axis=0))  # (T, H)
    ch = expand_groups(C, H)
    return np.einsum("hpn,thn->thp", h0, ch) * cum[:, :, None]


# -- full layer ---------------------------------------------------------------


def _split_proj(cfg: SsdConfig, zxbcdt: np.ndarray):
    di, gn = cfg.d_inner, cfg.n_groups * cfg.d_state
    z = zxbcdt[:, :di]
    xbc = zxbcdt[:, di : 2 * di + 2 * gn]
    dt_raw = zxbcdt[:, 2 * di + 2 * gn :]
    return z, xbc, dt_raw


def _split_xbc(cfg: SsdConfig, xbc: np.ndarray):
    di, gn = cfg.d_inner, cfg.n_groups * cfg.d_state
    T = xbc.shape[0]
    x = xbc[:, :di].reshape(T, cfg.n_heads, cfg.d_head)
    B = xbc[:, di : di + gn].reshape(T, cfg.n_groups, cfg.d_state)
    C = xbc[:, di + gn :].reshape(T, cfg.n_groups, cfg.d_state)
    return x, B, C


def _causal_conv(cfg: SsdConfig, params: SsdLayerParams, xbc: np.ndarray, history: np.ndarray):
    """Depthwise causal conv + silu; returns (activated stream, new history)."""
    if cfg.conv_width == 0:
        return xbc, history
    w = cfg.conv_width
    full = np.concatenate([history.astype(xbc.dtype), xbc], axis=0)
    T = xbc.shape[0]
    out = np.broadcast_to(params.conv_bias, xbc.shape).astype(xbc.dtype)
    for k in range(w):
        out = out + full[k : k + T] * params.conv_weight[k]
    return silu(out), full[full.shape[0] - (w - 1) :]


def _check_width(residual_in: np.ndarray, params: SsdLayerParams) -> None:
    if residual_in.ndim != 2 or residual_in.shape[1] != params.in_proj.shape[0]:
        raise DimensionError(
            f"residual width {residual_in.shape} does not match d_model={params.in_proj.shape[0]}"
        )


def ssd_layer_forward(
    cfg: SsdConfig,
    params: SsdLayerParams,
    residual_in: np.ndarray,
    state: SsmState | None = None,
    *,
    norm_gain: np.ndarray | None = None,
    eps: float = DEFAULT_EPS,
):
    """Prefill path for one Mamba layer. Returns ``(residual_out, state')``.

    ``norm_gain`` applies the block's pre-norm to the branch input only.
    """
    _check_width(residual_in, params)
    state = state or SsmState.zeros(cfg)
    u = residual_in if norm_gain is None else rmsnorm(residual_in, norm_gain, eps)
    z, xbc, dt_raw = _split_proj(cfg, u @ params.in_proj)
    xbc, conv_hist = _causal_conv(cfg, params, xbc, state.conv)
    x, B, C = _split_xbc(cfg, xbc)
    dt = softplus(dt_raw + params.dt_bias)
    y, h = ssd_chunked_scan(params.A, dt, x, B, C, params.D, state.h, chunk_size=cfg.chunk_size)
    y = y.reshape(y.shape[0], cfg.d_inner) * silu(z)
    out = (residual_in + y @ params.out_proj).astype(residual_in.dtype, copy=False)
    return out, SsmState(h=h.astype(np.float32), conv=conv_hist.astype(np.float32))


def ssd_layer_decode(
    cfg: SsdConfig,
    params: SsdLayerParams,
    residual_in: np.ndarray,
    state: SsmState,
    *,
    norm_gain: np.ndarray | None = None,
    eps: float = DEFAULT_EPS,
):
    """Decode path: one position through the selective state update."""
    _check_width(residual_in, params)
    if residual_in.shape[0] != 1:
        raise DimensionError("decode takes exactly one position")
    u = residual_in if norm_gain is None else rmsnorm(residual_in, norm_gain, eps)
    z, xbc, dt_raw = _split_proj(cfg, u @ params.in_proj)
    xbc, conv_hist = _causal_conv(cfg, params, xbc, state.conv)
    x, B, C = _split_xbc(cfg, xbc)
    dt = softplus(dt_raw + params.dt_bias)
    y, h = ssd_decode_step(params.A, params.D, state.h, x[0], dt[0], B[0], C[0])
    y = y.reshape(1, cfg.d_inner) * silu(z)
    out = (residual_in + y @ params.out_proj).astype(residual_in.dtype, copy=False)
    return out, SsmState(h=h, conv=conv_hist.astype(np.float32))


def ssd_layer_reference(cfg, params, residual_in, state=None, *, norm_gain=None, eps=DEFAULT_EPS):
    """Float64 re-implementation of the layer with explicit loops and the naive scan."""
    f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    r = f(residual_in)
    T, d_model = r.shape
    if norm_gain is not None:
        r_n = np.stack([row / np.sqrt(np.mean(row * row) + eps) * f(norm_gain) for row in r])
    else:
        r_n = r
    proj = r_n @ f(params.in_proj)
    di, gn, H = cfg.d_inner, cfg.n_groups * cfg.d_state, cfg.n_heads
    z, xbc, dt_raw = proj[:, :di], proj[:, di : 2 * di + 2 * gn], proj[:, 2 * di + 2 * gn :]
    if cfg.conv_width:
        w = cfg.conv_width
        hist = np.zeros((w - 1, cfg.conv_dim)) if state is None else f(state.conv)
        seq = np.concatenate([hist, xbc])
        conv = np.zeros_like(xbc)
        for t in range(T):
            acc = f(params.conv_bias).copy()
            for k in range(w):
                acc += seq[t + k] * f(params.conv_weight)[k]
            conv[t] = acc / (1.0 + np.exp(-acc))
        xbc = conv
    x = xbc[:, :di].reshape(T, H, cfg.d_head)
    B = xbc[:, di : di + gn].reshape(T, cfg.n_groups, cfg.d_state)
    C = xbc[:, di + gn :].reshape(T, cfg.n_groups, cfg.d_state)
    dt = np.log1p(np.exp(dt_raw + f(params.dt_bias)))
    A = -np.exp(f(params.A_log))
    h0 = None if state is None else f(state.h)
    y, h = ssd_naive_scan(A, dt, x, B, C, f(params.D), h0, precision=Precision.F64)
    gate = z / (1.0 + np.exp(-z))
    return r + (y.reshape(T, di) * gate) @ f(params.out_proj), h
