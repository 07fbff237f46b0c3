"""Dense tensor primitives.

Tensors are plain row-major ``numpy.ndarray`` values; the element dtype is the
precision. Every fast op checks shapes at its boundary, and each has a slow
float64 reference beside it (``*_reference``) that tests and the verify suite
use as ground truth.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import DimensionError, DomainError

Tensor = np.ndarray

DEFAULT_EPS = 1e-5


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"
    # float32 storage with the significand rounded to 8 bits after every write
    BF16EMU = "bf16emu"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self is Precision.F64 else np.float32)

    def store(self, x: Tensor) -> Tensor:
        """Cast ``x`` into this precision's storage format."""
        x = np.asarray(x, dtype=self.dtype)
        if self is Precision.BF16EMU:
            return round_bf16(x)
        return x


def tensor(data, precision: Precision = Precision.F32) -> Tensor:
    t = precision.store(np.array(data))
    if t.ndim and min(t.shape) < 1:
        raise DimensionError(f"empty dimension in shape {t.shape}")
    return np.ascontiguousarray(t)


def round_bf16(x: Tensor) -> Tensor:
    """Round float32 values to the nearest bfloat16 value (ties to even).

    Storage stays float32. NaN and infinities pass through unchanged.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32)
    out = rounded.view(np.float32).reshape(x.shape)
    return np.where(np.isfinite(x), out, x)


def _check_same_precision(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: precision mismatch {a.dtype} vs {b.dtype}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_precision(a, b, "matmul")
    return a @ b


def matmul_reference(a: Tensor, b: Tensor) -> Tensor:
    """Triple-loop float64 product."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    if eps <= 0:
        raise DomainError("rmsnorm eps must be positive")
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} vs input {x.shape}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + eps) * gain).astype(x.dtype, copy=False)


def rmsnorm_reference(x: Tensor, gain: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    for r, row in enumerate(flat):
        rms = math.sqrt(sum(v * v for v in row) / len(row) + eps)
        out[r] = [v / rms * float(g) for v, g in zip(row, gain)]
    return out.reshape(x.shape)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    m = np.max(x, axis=-1, keepdims=True)
    # rows that are entirely -inf would give nan; keep them at zero weight
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    x = np.asarray(x)
    return x * sigmoid(x)


def softplus(x: Tensor) -> Tensor:
    x = np.asarray(x)
    return np.logaddexp(x.dtype.type(0), x)


def decay_matrix(log_alpha: Tensor) -> Tensor:
    """Lower-triangular table of products of decays.

    ``L[..., i, j] = exp(sum(log_alpha[..., j+1 : i+1]))`` for ``i >= j`` and 0
    above the diagonal. Leading axes are batch axes. The segment sums are
    accumulated directly (masked cumulative sum) instead of differencing two
    prefix sums, which would cancel catastrophically on long chunks.
    """
    log_alpha = np.asarray(log_alpha)
    if not np.all(np.isfinite(log_alpha)):
        raise DomainError("decay_matrix: non-finite log decay")
    if np.any(log_alpha > 0):
        raise DomainError("decay_matrix: positive log decay would grow the state")
    t = log_alpha.shape[-1]
    strict = np.tril(np.ones((t, t), dtype=bool), k=-1)
    # rep[..., k, j] = log_alpha[k] where k > j
    rep = np.where(strict, log_alpha[..., :, None], 0.0)
    seg = np.cumsum(rep, axis=-2)
    lower = np.tril(np.ones((t, t), dtype=bool))
    return np.where(lower, np.exp(np.where(lower, seg, 0.0)), 0.0).astype(log_alpha.dtype, copy=False)


def decay_matrix_reference(log_alpha) -> np.ndarray:
    """Per-entry direct products, float64."""
    alpha = [math.exp(float(v)) for v in log_alpha]
    t = len(alpha)
    out = np.zeros((t, t))
    for i in range(t):
        for j in range(i + 1):
            p = 1.0
            for k in range(j + 1, i + 1):
                p *= alpha[k]
            out[i, j] = p
    return out
