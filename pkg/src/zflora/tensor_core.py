"""Deterministic dense kernels and transformer primitives.

All other modules build on the operations here. Two matmul engines are
provided:

- ``"exact"``: a scalar triple loop (numba-compiled) that accumulates the
  inner k dimension in ascending order. The result for output element
  (i, j) depends only on row i of ``a`` and column j of ``b``, so stacking
  extra rows onto ``a``'s counterpart or extra columns onto ``b`` leaves
  previously existing elements bit-identical. That property turns the
  fused/unfused equality checks into hard assertions instead of tolerances.
- ``"blas"``: ``numpy``'s vendor BLAS. Much faster, used by the latency
  harnesses and toy training. Deterministic in-process at a fixed thread
  count, but carries no cross-shape bit-exactness guarantee.

Row-parallel execution of the exact engine splits rows across threads and
keeps each row's accumulation order unchanged, so results are bit-identical
for any thread count.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class MatmulPolicy:
    """Execution policy for matmul kernels.

    The exact engine always accumulates k in ascending order;
    ``parallel_rows`` only distributes rows, never reassociates sums.
    """

    engine: str = "exact"  # "exact" | "blas"
    parallel_rows: bool = False

    def __post_init__(self):
        if self.engine not in ("exact", "blas"):
            raise ValueError(f"unknown matmul engine: {self.engine!r}")


EXACT = MatmulPolicy(engine="exact")
EXACT_PARALLEL = MatmulPolicy(engine="exact", parallel_rows=True)
FAST = MatmulPolicy(engine="blas")

_default = threading.local()


def get_default_policy() -> MatmulPolicy:
    return getattr(_default, "policy", EXACT)


@contextmanager
def default_policy(policy: MatmulPolicy):
    """Temporarily set the policy used when ops are called without one."""
    prev = get_default_policy()
    _default.policy = policy
    try:
        yield
    finally:
        _default.policy = prev


# ── op recording (used by the FLOP-accounting tests and bench ledger) ────

_oplog = threading.local()


@contextmanager
def record_matmuls():
    """Record every matmul executed in this thread as (batch, m, k, n)."""
    log: list[tuple[int, int, int, int]] = []
    prev = getattr(_oplog, "log", None)
    _oplog.log = log
    try:
        yield log
    finally:
        _oplog.log = prev


def _log_matmul(batch: int, m: int, k: int, n: int) -> None:
    log = getattr(_oplog, "log", None)
    if log is not None:
        log.append((batch, m, k, n))


# ── exact ascending-k kernels ─────────────────────────────────────────────


@njit(cache=True)
def _mm_serial(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = out[i, j]  # zero of the output dtype
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _mm_parallel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        for j in range(n):
            acc = out[i, j]
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc


@njit(cache=True)
def _bmm_serial(a, b, out):
    bs, m, k = a.shape
    n = b.shape[2]
    for s in range(bs):
        for i in range(m):
            for j in range(n):
                acc = out[s, i, j]
                for kk in range(k):
                    acc += a[s, i, kk] * b[s, kk, j]
                out[s, i, j] = acc


def matmul(a: np.ndarray, b: np.ndarray, policy: MatmulPolicy | None = None) -> np.ndarray:
    """c[i, j] = sum_k a[i, k] * b[k, j], k accumulated ascending."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    pol = policy if policy is not None else get_default_policy()
    _log_matmul(1, a.shape[0], a.shape[1], b.shape[1])
    if pol.engine == "blas":
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    a = np.ascontiguousarray(a, dtype=out.dtype)
    b = np.ascontiguousarray(b, dtype=out.dtype)
    if pol.parallel_rows:
        _mm_parallel(a, b, out)
    else:
        _mm_serial(a, b, out)
    return out


def batched_matmul(a: np.ndarray, b: np.ndarray, policy: MatmulPolicy | None = None) -> np.ndarray:
    """Batched matmul over matching leading axes: (B,m,k) x (B,k,n) -> (B,m,n)."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"batched_matmul expects 3-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batch shapes disagree: {a.shape} x {b.shape}")
    pol = policy if policy is not None else get_default_policy()
    _log_matmul(a.shape[0], a.shape[1], a.shape[2], b.shape[2])
    if pol.engine == "blas":
        return a @ b
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=np.result_type(a, b))
    _bmm_serial(np.ascontiguousarray(a, dtype=out.dtype), np.ascontiguousarray(b, dtype=out.dtype), out)
    return out


# ── fusion helpers ────────────────────────────────────────────────────────


def concat_rows(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Stack [W; A]: first d_o rows are w, the next r rows are a."""
    if w.ndim != 2 or a.ndim != 2:
        raise DimensionError("concat_rows expects 2-D operands")
    if a.shape[0] and w.shape[1] != a.shape[1]:
        raise DimensionError(f"column counts disagree: {w.shape} vs {a.shape}")
    if a.shape[0] == 0:
        return w
    return np.ascontiguousarray(np.concatenate([w, a.astype(w.dtype, copy=False)], axis=0))


def concat_cols(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack [W B]: so that [W B] @ [x; dx] == W @ x + B @ dx."""
    if w.ndim != 2 or b.ndim != 2:
        raise DimensionError("concat_cols expects 2-D operands")
    if b.shape[1] and w.shape[0] != b.shape[0]:
        raise DimensionError(f"row counts disagree: {w.shape} vs {b.shape}")
    if b.shape[1] == 0:
        return w
    return np.ascontiguousarray(np.concatenate([w, b.astype(w.dtype, copy=False)], axis=1))


# ── normalization / activations ──────────────────────────────────────────


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """out[i] = weight[i] * x[i] / sqrt(mean(x^2) + eps) for a 1-D x."""
    if x.ndim != 1 or weight.ndim != 1 or x.shape != weight.shape:
        raise DimensionError(f"rms_norm expects matching vectors, got {x.shape} and {weight.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return rms_norm_rows(x[None, :], weight, eps)[0]


def rms_norm_rows(x: np.ndarray, weight: np.ndarray, eps: float, norm_width: int | None = None) -> np.ndarray:
    """Row-wise RMS norm.

    ``norm_width`` restricts the mean-square denominator to the first
    ``norm_width`` columns while the scale vector still covers every
    column. Extended adapter streams use this so the extra dims never
    perturb the base dims' normalization.
    """
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise DimensionError(f"rms_norm_rows: x {x.shape} incompatible with weight {weight.shape}")
    nw = x.shape[1] if norm_width is None else norm_width
    dt = x.dtype
    xs = x[:, :nw]
    ms = np.mean(xs * xs, axis=1, keepdims=True, dtype=dt)
    inv = dt.type(1.0) / np.sqrt(ms + dt.type(eps))
    return x * (weight.astype(dt, copy=False) * inv)


def rope_tables(positions: np.ndarray, head_dim: int, theta: float, angle_width: int | None = None,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim // 2).

    Pair i rotates by pos * theta^(-2i / angle_width); ``angle_width``
    defaults to ``head_dim``. Widened adapter heads pass the base model's
    width so the original dims keep their original angles and only the
    extra pairs continue the schedule.
    """
    if head_dim % 2 != 0:
        from .errors import ConfigError

        raise ConfigError(f"RoPE requires an even head dim, got {head_dim}")
    aw = head_dim if angle_width is None else angle_width
    idx = np.arange(0, head_dim, 2, dtype=np.float64)
    freqs = theta ** (-idx / aw)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: np.ndarray, positions, theta: float, angle_width: int | None = None) -> np.ndarray:
    """Rotate adjacent pairs (2i, 2i+1) of each row by position-dependent angles.

    ``x`` is (L, head_dim) or (heads, L, head_dim); row t uses positions[t].
    """
    hd = x.shape[-1]
    cos, sin = rope_tables(np.asarray(positions), hd, theta, angle_width, dtype=x.dtype)
    if x.shape[-2] != cos.shape[0]:
        raise DimensionError(f"rope_apply: {x.shape[-2]} rows but {cos.shape[0]} positions")
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if np.isnan(x).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x)."""
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    return x / (dt.type(1.0) + np.exp(-x))


def warm_up_kernels() -> None:
    """Trigger numba compilation of the exact kernels (cached on disk)."""
    for dt in (np.float32, np.float64):
        a = np.ones((2, 3), dtype=dt)
        b = np.ones((3, 2), dtype=dt)
        matmul(a, b, EXACT)
        matmul(a, b, EXACT_PARALLEL)
        batched_matmul(a[None], b[None], EXACT)
