"""Block-tiled forward and backward passes for decayed linear attention.

The sequence is cut into blocks of ``block`` rows. Within a block the output
is the conventional masked left product; across blocks a d x dv running
key-value state carries everything older, so one block's work never looks at
more than ``block`` rows of input. That keeps time linear in sequence length
and the working set independent of it.

Row bookkeeping, with rows 0-indexed inside a block of size B:

* inter-block read: row j adds ``lam**(j+1) * q_j @ kv`` (the state is
  referenced at the block's left boundary);
* state fold: ``kv <- lam**B * kv + (comp * k).T @ v`` with
  ``comp[j] = lam**(B-1-j)``, re-referencing the state at the right boundary;
* a final partial block of r rows uses the leading r x r mask, the first r
  row factors, the last r complement factors, and decay ``lam**r``.

The backward pass replays the state forward to produce dq, then walks blocks
in reverse carrying the mirrored state ``dkv = sum_{s>boundary}
lam**(s-boundary) * outer(q_s, d_out_s)``, which at the moment block i is
emitted holds contributions from blocks strictly after i.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import scratch
from .reference import GradBundle, KvState, _check_decay, _check_inputs, decay_mask, power_table


@dataclass
class BlockDecayDiag:
    """Per-row decay factors for one block.

    ``lambda_powers[j] = lam**(j+1)`` scales row j's read of the carried
    state; ``complement_powers[j] = lam**(B-1-j)`` scales row j's write into
    it. Both come from one shared iterated-product table, so elementwise
    ``lambda_powers * complement_powers`` reproduces ``lam**B`` exactly for
    dyadic decay rates and to within a rounding of the shared table otherwise.
    """

    lambda_powers: np.ndarray
    complement_powers: np.ndarray


@dataclass
class TiledForwardResult:
    o: np.ndarray
    final_kv: KvState


def block_decay(block: int, lam: float, dtype=np.float64) -> BlockDecayDiag:
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    pows = power_table(lam, block + 1, dtype)
    lambda_powers = scratch.empty(block, np.dtype(dtype))
    lambda_powers[:] = pows[1:]
    complement_powers = scratch.empty(block, np.dtype(dtype))
    complement_powers[:] = pows[block - 1 :: -1]
    return BlockDecayDiag(lambda_powers, complement_powers)


def _check_block(block: int) -> None:
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")


class _Workspace:
    """Preallocated per-pass buffers, all sized by (block, d, dv) only."""

    def __init__(self, n, d, dv, lam, block, dt, backward=False):
        m = min(block, n)
        self.diag = block_decay(block, lam, dt)
        self.lam_col = self.diag.lambda_powers[:, None]
        self.comp_col = self.diag.complement_powers[:, None]
        self.mask = decay_mask(m, lam, dt)
        self.scores = scratch.empty((m, m), dt)
        self.qk_rows = scratch.empty((m, d), dt)
        self.inter_d = scratch.empty((m, d), dt)
        self.inter_dv = scratch.empty((m, dv), dt)
        self.kv_update = scratch.empty((d, dv), dt)
        if backward:
            self.dv_rows = scratch.empty((m, dv), dt)

    def lam_pow(self, r):
        # lam**r for a block of r rows; exact table entry
        return self.diag.lambda_powers[r - 1]


def _forward_blocks(q, k, v, lam, block, kv, out, ws):
    """Advance ``kv`` over the rows of q/k/v block by block, filling ``out``."""
    n = q.shape[0]
    start = 0
    while start < n:
        stop = min(start + block, n)
        r = stop - start
        qi, ki, vi = q[start:stop], k[start:stop], v[start:stop]
        scores = ws.scores[:r, :r]
        np.matmul(qi, ki.T, out=scores)
        scores *= ws.mask[:r, :r]
        np.matmul(scores, vi, out=out[start:stop])
        # read of the carried state, row j scaled by lam**(j+1)
        scaled_q = ws.qk_rows[:r]
        np.multiply(qi, ws.lam_col[:r], out=scaled_q)
        np.matmul(scaled_q, kv, out=ws.inter_dv[:r])
        out[start:stop] += ws.inter_dv[:r]
        # fold this block into the state
        scaled_k = ws.qk_rows[:r]
        np.multiply(ki, ws.comp_col[block - r :], out=scaled_k)
        kv *= ws.lam_pow(r)
        np.matmul(scaled_k.T, vi, out=ws.kv_update)
        kv += ws.kv_update
        start = stop
    return kv


def tiled_forward(q, k, v, lam: float, block: int) -> TiledForwardResult:
    """Block-tiled forward pass.

    Matches :func:`~tila.reference.oracle_forward` up to floating-point
    reassociation, exactly when the whole sequence fits in one block. Scratch
    is a function of (block, d, dv) only, never of n.
    """
    q, k, v = _check_inputs(q, k, v)
    _check_decay(lam)
    _check_block(block)
    n, d = q.shape
    dv = v.shape[1]
    dt = q.dtype
    ws = _Workspace(n, d, dv, lam, block, dt)
    out = np.empty((n, dv), dt)
    kv = scratch.zeros((d, dv), dt)
    kv = _forward_blocks(q, k, v, lam, block, kv, out, ws)
    return TiledForwardResult(out, KvState(kv, n))


def chunked_forward(q, k, v, lam: float, block: int, state: KvState) -> tuple[np.ndarray, KvState]:
    """Streaming forward over one chunk, carrying the caller's state.

    Consecutive chunks whose lengths are multiples of ``block`` reproduce the
    one-shot tiled pass bit for bit; arbitrary chunk lengths agree with the
    per-token recurrence up to reassociation. The input state is not modified.
    """
    q, k, v = _check_inputs(q, k, v)
    _check_decay(lam)
    _check_block(block)
    n, d = q.shape
    dv = v.shape[1]
    dt = q.dtype
    if state.kv.shape != (d, dv):
        raise ValueError(f"state.kv must have shape {(d, dv)}, got {state.kv.shape}")
    ws = _Workspace(n, d, dv, lam, block, dt)
    out = np.empty((n, dv), dt)
    kv = scratch.empty((d, dv), dt)
    np.copyto(kv, state.kv.astype(dt, copy=False))
    kv = _forward_blocks(q, k, v, lam, block, kv, out, ws)
    return out, KvState(kv, state.tokens_absorbed + n)


def tiled_backward(q, k, v, d_out, lam: float, block: int) -> GradBundle:
    """Block-tiled backward pass; gradients of <d_out, tiled_forward(...)>.

    Two sweeps: a forward-order sweep recomputes the running state (no
    per-block checkpoints are stored) and emits dq; a reverse-order sweep
    carries the mirrored state and emits dk and dv, folding each block into
    it only after that block's gradients are written.
    """
    q, k, v, d_out = _check_inputs(q, k, v, d_out)
    _check_decay(lam)
    _check_block(block)
    n, d = q.shape
    dv = v.shape[1]
    dt = q.dtype
    ws = _Workspace(n, d, dv, lam, block, dt, backward=True)
    dq = np.empty((n, d), dt)
    dk = np.empty((n, d), dt)
    dv_grad = np.empty((n, dv), dt)

    # forward-order sweep: dq, recomputing kv
    kv = scratch.zeros((d, dv), dt)
    start = 0
    while start < n:
        stop = min(start + block, n)
        r = stop - start
        ki, vi, doi = k[start:stop], v[start:stop], d_out[start:stop]
        scores = ws.scores[:r, :r]
        np.matmul(doi, vi.T, out=scores)
        scores *= ws.mask[:r, :r]
        np.matmul(scores, ki, out=dq[start:stop])
        scaled_do = ws.dv_rows[:r]
        np.multiply(doi, ws.lam_col[:r], out=scaled_do)
        np.matmul(scaled_do, kv.T, out=ws.inter_d[:r])
        dq[start:stop] += ws.inter_d[:r]
        scaled_k = ws.qk_rows[:r]
        np.multiply(ki, ws.comp_col[block - r :], out=scaled_k)
        kv *= ws.lam_pow(r)
        np.matmul(scaled_k.T, vi, out=ws.kv_update)
        kv += ws.kv_update
        start = stop

    # reverse-order sweep: dk, dv, carrying dkv from strictly-later blocks
    dkv = scratch.zeros((d, dv), dt)
    for start in reversed(range(0, n, block)):
        stop = min(start + block, n)
        r = stop - start
        qi, ki, vi, doi = q[start:stop], k[start:stop], v[start:stop], d_out[start:stop]
        scores = ws.scores[:r, :r]
        np.matmul(doi, vi.T, out=scores)
        scores *= ws.mask[:r, :r]
        np.matmul(scores.T, qi, out=dk[start:stop])
        scaled_v = ws.dv_rows[:r]
        np.multiply(vi, ws.comp_col[block - r :], out=scaled_v)
        np.matmul(scaled_v, dkv.T, out=ws.inter_d[:r])
        dk[start:stop] += ws.inter_d[:r]
        np.matmul(qi, ki.T, out=scores)
        scores *= ws.mask[:r, :r]
        np.matmul(scores.T, doi, out=dv_grad[start:stop])
        scaled_k = ws.qk_rows[:r]
        np.multiply(ki, ws.comp_col[block - r :], out=scaled_k)
        np.matmul(scaled_k, dkv, out=ws.inter_dv[:r])
        dv_grad[start:stop] += ws.inter_dv[:r]
        scaled_q = ws.qk_rows[:r]
        np.multiply(qi, ws.lam_col[:r], out=scaled_q)
        dkv *= ws.lam_pow(r)
        np.matmul(scaled_q.T, doi, out=ws.kv_update)
        dkv += ws.kv_update

    return GradBundle(dq, dk, dv_grad)


def _head_call(fn, index, args):
    try:
        return fn(*args)
    except Exception as exc:
        raise type(exc)(f"head {index}: {exc}") from exc


def _run_heads(fn, per_head_args, parallel):
    if not parallel or len(per_head_args) <= 1:
        return [_head_call(fn, i, args) for i, args in enumerate(per_head_args)]
    workers = min(len(per_head_args), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_head_call, fn, i, args) for i, args in enumerate(per_head_args)]
        return [f.result() for f in futures]


def batched_forward(inputs, block: int, parallel: bool = False) -> list[TiledForwardResult]:
    """Independent per-head tiled forward; ``inputs`` is a list of (q, k, v, lam).

    Element-wise identical to calling :func:`tiled_forward` per head. With
    ``parallel=True`` heads fan out to a thread pool (each head shares no
    mutable state with the others).
    """
    per_head = [(q, k, v, lam, block) for q, k, v, lam in inputs]
    return _run_heads(tiled_forward, per_head, parallel)


def batched_backward(inputs, block: int, parallel: bool = False) -> list[GradBundle]:
    """Per-head tiled backward; ``inputs`` is a list of (q, k, v, d_out, lam)."""
    per_head = [(q, k, v, d_out, lam, block) for q, k, v, d_out, lam in inputs]
    return _run_heads(tiled_backward, per_head, parallel)
