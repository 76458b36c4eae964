"""Slow, obviously-correct reference paths for decayed linear attention.

Causal attention with exponential decay: output row t is
``q_t @ sum_{s<=t} lam**(t-s) * outer(k_s, v_s)``. This module computes it two
independent ways (a full masked left product and a per-token recurrence),
plus the analytic gradients in full-mask form and a constant-memory
single-token inference step. The tiled kernels are tested against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scratch

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass
class KvState:
    """Running key-value summary plus the count of tokens it has absorbed."""

    kv: np.ndarray
    tokens_absorbed: int = 0

    @classmethod
    def fresh(cls, d: int, dv: int, dtype=np.float64) -> "KvState":
        return cls(np.zeros((d, dv), dtype), 0)


@dataclass
class GradBundle:
    """Gradients of <d_out, output> with respect to q, k, v."""

    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def _check_decay(lam: float) -> None:
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"decay rate must be in (0, 1], got {lam}")


def _as_float(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _check_inputs(q, k, v, d_out=None):
    """Normalize dtypes and validate shapes; returns the float arrays."""
    q, k, v = _as_float(q), _as_float(k), _as_float(v)
    arrs = [q, k, v]
    if d_out is not None:
        arrs.append(_as_float(d_out))
    dt = np.result_type(*arrs)
    arrs = [a.astype(dt, copy=False) for a in arrs]
    q, k, v = arrs[:3]
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2-D matrices")
    if q.shape != k.shape:
        raise ValueError(f"q and k must have the same shape, got {q.shape} and {k.shape}")
    if v.shape[0] != q.shape[0]:
        raise ValueError(f"v must have {q.shape[0]} rows, got {v.shape[0]}")
    if d_out is not None:
        dob = arrs[3]
        if dob.shape != v.shape:
            raise ValueError(f"d_out must have shape {v.shape}, got {dob.shape}")
        return q, k, v, dob
    return q, k, v


def power_table(lam: float, count: int, dtype=np.float64) -> np.ndarray:
    """[lam**0, lam**1, ..., lam**(count-1)] by iterated multiplication.

    Iterated products (not pow-of-log) so that every consumer of decay
    weights agrees bit for bit on the same entries. Powers below the smallest
    normal number flush to exact zero: gradual-underflow tails carry no
    information at any testable tolerance but make downstream matrix products
    pay denormal penalties.
    """
    _check_decay(lam)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    dt = np.dtype(dtype)
    tiny = np.finfo(dt).tiny
    out = scratch.empty(count, dt)
    lam_t = dt.type(lam)
    acc = dt.type(1.0)
    for j in range(count):
        out[j] = acc
        acc = acc * lam_t
        if acc < tiny:
            out[j + 1 :] = 0.0
            return out
    return out


def decay_mask(n: int, lam: float, dtype=np.float64) -> np.ndarray:
    """Lower-triangular n x n mask with entry (s, t) = lam**(s-t) for s >= t."""
    _check_decay(lam)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dt = np.dtype(dtype)
    pows = power_table(lam, n, dt)
    rev = scratch.empty(n, dt)
    rev[:] = pows[::-1]
    m = scratch.zeros((n, n), dt)
    for s in range(n):
        m[s, : s + 1] = rev[n - 1 - s :]
    return m


def oracle_forward(q, k, v, lam: float) -> np.ndarray:
    """Masked left-product forward: ``((q @ k.T) * mask) @ v``.

    O(n^2 d) time and O(n^2) scratch; the ground truth everything else is
    compared against.
    """
    q, k, v = _check_inputs(q, k, v)
    _check_decay(lam)
    n = q.shape[0]
    dt = q.dtype
    mask = decay_mask(n, lam, dt)
    scores = scratch.empty((n, n), dt)
    np.matmul(q, k.T, out=scores)
    scores *= mask
    return scores @ v


def _decay_step(kv: np.ndarray, lam_t, q_row, k_row, v_row):
    """One token of the recurrence: new_kv = lam*kv + outer(k, v); o = q @ new_kv."""
    new_kv = lam_t * kv
    new_kv += np.outer(k_row, v_row)
    return q_row @ new_kv, new_kv


def recurrent_forward(q, k, v, lam: float) -> tuple[np.ndarray, KvState]:
    """Per-token recurrent forward, O(n d dv) time and O(d dv) state.

    Returns the output matrix and the final state with all n tokens absorbed.
    Folding :func:`inference_step` over the rows reproduces this exactly
    (same operation order).
    """
    q, k, v = _check_inputs(q, k, v)
    _check_decay(lam)
    n, d = q.shape
    dv = v.shape[1]
    dt = q.dtype
    lam_t = dt.type(lam)
    out = np.empty((n, dv), dt)
    kv = scratch.zeros((d, dv), dt)
    for t in range(n):
        out[t], kv = _decay_step(kv, lam_t, q[t], k[t], v[t])
    return out, KvState(kv, n)


def inference_step(q_t, k_t, v_t, state: KvState, lam: float) -> tuple[np.ndarray, KvState]:
    """Absorb one token into the state and emit its output row.

    O(d dv) regardless of how many tokens came before; the caller owns the
    sequencing of states. The input state is not modified.
    """
    _check_decay(lam)
    q_t, k_t, v_t = _as_float(q_t).ravel(), _as_float(k_t).ravel(), _as_float(v_t).ravel()
    kv = state.kv
    if kv.ndim != 2:
        raise ValueError("state.kv must be a 2-D matrix")
    d, dv = kv.shape
    if q_t.shape[0] != d or k_t.shape[0] != d:
        raise ValueError(f"q_t and k_t must have length {d}, got {q_t.shape[0]} and {k_t.shape[0]}")
    if v_t.shape[0] != dv:
        raise ValueError(f"v_t must have length {dv}, got {v_t.shape[0]}")
    dt = kv.dtype
    o_t, new_kv = _decay_step(kv, dt.type(lam), q_t.astype(dt, copy=False),
                              k_t.astype(dt, copy=False), v_t.astype(dt, copy=False))
    return o_t, KvState(new_kv, state.tokens_absorbed + 1)


def oracle_backward(q, k, v, d_out, lam: float) -> GradBundle:
    """Analytic gradients of <d_out, oracle_forward(q, k, v)> in full-mask form.

    dq = ((d_out @ v.T) * mask) @ k
    dk = ((d_out @ v.T) * mask).T @ q
    dv = ((q @ k.T) * mask).T @ d_out
    """
    q, k, v, d_out = _check_inputs(q, k, v, d_out)
    _check_decay(lam)
    n = q.shape[0]
    dt = q.dtype
    mask = decay_mask(n, lam, dt)
    buf = scratch.empty((n, n), dt)
    np.matmul(d_out, v.T, out=buf)
    buf *= mask
    dq = buf @ k
    dk = buf.T @ q
    np.matmul(q, k.T, out=buf)
    buf *= mask
    dv_grad = buf.T @ d_out
    return GradBundle(dq, dk, dv_grad)
