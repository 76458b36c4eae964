"""Wall-time scaling and scratch-memory accounting for the attention passes.

Desk-scale evidence for the complexity claims: the tiled pass should cost the
same per token at any sequence length with an n-independent working set,
while the masked-product oracle goes quadratic in both time and scratch.
Timing is median-of-reps after one discarded warm-up run; the warm-up run
doubles as the scratch-accounting run. Results land in a CSV.

Runs are single-threaded by default (BLAS thread pools pinned to one thread)
so doubling ratios reflect the algorithm, not thread-pool ramp-up.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import scratch
from .kernel import batched_forward, chunked_forward, tiled_backward, tiled_forward
from .matrix import AttentionConfig, dtype_for, random_matrix
from .reference import KvState, oracle_backward, oracle_forward, recurrent_forward
from .verify import compare

IMPLS = ("oracle", "recurrent", "tiled", "chunked")
DIRECTIONS = ("forward", "backward", "fwd+bwd")
CSV_HEADER = "impl,direction,n,d,dv,B,lambda,reps,median_s,us_per_token,scratch_bytes"

LINEAR_BAND = (1.5, 2.7)
QUADRATIC_BAND = (3.2, 5.0)

# fixed chunk count keeps the streaming pass's total scratch n-independent
STREAM_CHUNKS = 4

# directions used by scaling_sweep: the tiled claim is about training
# (forward+backward); the references are timed forward-only
SWEEP_DIRECTIONS = {"oracle": "forward", "recurrent": "forward",
                    "tiled": "fwd+bwd", "chunked": "forward"}

_malloc_pinned = False


def _pin_allocator() -> None:
    """Keep freed pass buffers in the heap so timed reps reuse warm pages.

    By default glibc returns big buffers to the kernel on free, so every rep
    re-pays page faults whose cost varies with system state and allocation
    history; that noise lands on the smallest sweep sizes and skews the
    time-doubling ratios. Raising the mmap and trim thresholds makes the
    warm-up run absorb the first touch and the reps measure the pass itself.
    Best effort: silently skipped on non-glibc platforms.
    """
    global _malloc_pinned
    if _malloc_pinned:
        return
    _malloc_pinned = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_trim_threshold, 1 << 30)
        libc.mallopt(m_mmap_threshold, 1 << 30)
    except (OSError, AttributeError):
        pass


@dataclass
class BenchRecord:
    """One timing/memory measurement row."""

    impl: str
    direction: str
    n: int
    d: int
    dv: int
    block: int
    lam: float
    reps: int
    median_seconds: float
    per_token_microseconds: float
    scratch_bytes: int
    oom: bool = False


@dataclass
class ScalingVerdict:
    """Doubling ratios across an n-sweep and their classification."""

    impl: str
    ratios: list[float] = field(default_factory=list)
    classification: str = "inconclusive"


def classify(ratios) -> str:
    """linear-like / quadratic-like / inconclusive from time-doubling ratios."""
    ratios = list(ratios)
    if not ratios or any(not np.isfinite(r) for r in ratios):
        return "inconclusive"
    if all(LINEAR_BAND[0] <= r <= LINEAR_BAND[1] for r in ratios):
        return "linear-like"
    if all(QUADRATIC_BAND[0] <= r <= QUADRATIC_BAND[1] for r in ratios):
        return "quadratic-like"
    return "inconclusive"


def _stream_bounds(n: int) -> list[tuple[int, int]]:
    edges = [n * i // STREAM_CHUNKS for i in range(STREAM_CHUNKS + 1)]
    return [(a, b) for a, b in zip(edges, edges[1:]) if b > a]


def _make_pass(impl: str, direction: str, cfg: AttentionConfig, seed: int):
    """Build the zero-arg callable that runs one full pass over fresh inputs."""
    if impl not in IMPLS:
        raise ValueError(f"unknown impl {impl!r}, expected one of {IMPLS}")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}, expected one of {DIRECTIONS}")
    if impl in ("recurrent", "chunked") and direction != "forward":
        raise ValueError(f"{impl} supports only the forward direction")

    base = int(seed) * 10
    q = random_matrix(cfg.n, cfg.d, base + 0, cfg.precision)
    k = random_matrix(cfg.n, cfg.d, base + 1, cfg.precision)
    v = random_matrix(cfg.n, cfg.dv, base + 2, cfg.precision)
    d_out = None
    if direction != "forward":
        d_out = random_matrix(cfg.n, cfg.dv, base + 3, cfg.precision)
    lam, block = cfg.lam, cfg.block
    dt = dtype_for(cfg.precision)

    def forward():
        if impl == "oracle":
            oracle_forward(q, k, v, lam)
        elif impl == "recurrent":
            recurrent_forward(q, k, v, lam)
        elif impl == "tiled":
            tiled_forward(q, k, v, lam, block)
        else:
            state = KvState.fresh(cfg.d, cfg.dv, dt)
            for a, b in _stream_bounds(cfg.n):
                _, state = chunked_forward(q[a:b], k[a:b], v[a:b], lam, block, state)

    def backward():
        if impl == "oracle":
            oracle_backward(q, k, v, d_out, lam)
        else:
            tiled_backward(q, k, v, d_out, lam, block)

    if direction == "forward":
        return forward
    if direction == "backward":
        return backward

    def both():
        forward()
        backward()

    return both


def time_pass(impl: str, direction: str, cfg: AttentionConfig, reps: int,
              seed: int = 0, single_thread: bool = True) -> BenchRecord:
    """Median wall time over ``reps`` runs after one discarded warm-up.

    The warm-up run is metered for scratch bytes; only the pass itself is
    inside the timer (fixture generation and CSV I/O are not). Out-of-memory
    is reported as a record with NaN timings rather than raised.
    """
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    _pin_malloc_threshold()
    run = _make_pass(impl, direction, cfg, seed)
    limits = threadpool_limits(limits=1) if single_thread else nullcontext()
    try:
        with limits:
            with scratch.measure() as meter:
                run()
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
    except MemoryError:
        return BenchRecord(impl, direction, cfg.n, cfg.d, cfg.dv, cfg.block, cfg.lam,
                           reps, float("nan"), float("nan"), 0, oom=True)
    median = statistics.median(times)
    return BenchRecord(impl, direction, cfg.n, cfg.d, cfg.dv, cfg.block, cfg.lam,
                       reps, median, median * 1e6 / cfg.n, meter.bytes_allocated)


def time_batched_forward(heads: int, cfg: AttentionConfig, reps: int, seed: int = 0,
                         parallel: bool = True) -> BenchRecord:
    """Head-parallel batched mode, reported separately from the single-head rows."""
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    if heads < 1:
        raise ValueError(f"heads must be >= 1, got {heads}")
    inputs = []
    for h in range(heads):
        base = (int(seed) + h) * 10
        inputs.append((
            random_matrix(cfg.n, cfg.d, base + 0, cfg.precision),
            random_matrix(cfg.n, cfg.d, base + 1, cfg.precision),
            random_matrix(cfg.n, cfg.dv, base + 2, cfg.precision),
            cfg.lam,
        ))

    def run():
        batched_forward(inputs, cfg.block, parallel=parallel)

    with scratch.measure() as meter:
        run()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    return BenchRecord(f"batched[{heads}]", "forward", cfg.n, cfg.d, cfg.dv, cfg.block,
                       cfg.lam, reps, median, median * 1e6 / cfg.n, meter.bytes_allocated)


def _check_n_list(n_list) -> list[int]:
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4:
        raise ValueError("minimum 4 points required in the sequence-length sweep")
    for a, b in zip(n_list, n_list[1:]):
        if b != 2 * a:
            raise ValueError(f"sequence lengths must strictly double, got {a} -> {b}")
    return n_list


def scaling_sweep(impls, n_list, d: int, block: int, lam: float, reps: int,
                  precision: str = "single", seed: int = 0,
                  ) -> tuple[list[BenchRecord], list[ScalingVerdict]]:
    """Time each implementation across a doubling n-sweep and classify it.

    Tiled runs forward+backward (the training path); oracle, recurrent and
    chunked run forward only. Returns all records plus one verdict per
    implementation.
    """
    n_list = _check_n_list(n_list)
    records: list[BenchRecord] = []
    verdicts: list[ScalingVerdict] = []
    for impl in impls:
        direction = SWEEP_DIRECTIONS.get(impl)
        if direction is None:
            raise ValueError(f"unknown impl {impl!r}, expected one of {IMPLS}")
        impl_records = []
        for n in n_list:
            cfg = AttentionConfig(n=n, d=d, block=block, lam=lam, precision=precision)
            impl_records.append(time_pass(impl, direction, cfg, reps, seed=seed))
        records.extend(impl_records)
        times = [r.median_seconds for r in impl_records]
        ratios = [b / a if a > 0 else float("nan") for a, b in zip(times, times[1:])]
        verdicts.append(ScalingVerdict(impl, ratios, classify(ratios)))
    return records, verdicts


def block_size_sweep(n: int, d: int, lam: float, blocks, reps: int,
                     precision: str = "single", seed: int = 0) -> list[BenchRecord]:
    """Time the tiled forward pass across block sizes on identical inputs.

    Before timing, the outputs for every block size are checked against the
    first block size: tiling must change cost, never results.
    """
    blocks = [int(b) for b in blocks]
    if not blocks:
        raise ValueError("at least one block size required")
    base = int(seed) * 10
    q = random_matrix(n, d, base + 0, precision)
    k = random_matrix(n, d, base + 1, precision)
    v = random_matrix(n, d, base + 2, precision)
    tol = 1e-10 if precision == "double" else 1e-3
    reference = tiled_forward(q, k, v, lam, blocks[0]).o
    for block in blocks[1:]:
        out = tiled_forward(q, k, v, lam, block).o
        report = compare(out, reference, tol, f"B={block} vs B={blocks[0]}")
        if not report.passed:
            raise ValueError(
                f"block size {block} changed the output vs block size {blocks[0]} "
                f"(max rel {report.max_rel_error:.3e})"
            )
    records = []
    for block in blocks:
        cfg = AttentionConfig(n=n, d=d, block=block, lam=lam, precision=precision)
        records.append(time_pass("tiled", "forward", cfg, reps, seed=seed))
    return records


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def emit_csv(records, path) -> None:
    """Write records in input order; header and all numeric fields as decimal text."""
    records = list(records)
    if not records:
        raise ValueError("nothing to emit")
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(",".join([
                r.impl, r.direction, str(r.n), str(r.d), str(r.dv), str(r.block),
                _fmt(r.lam), str(r.reps), _fmt(r.median_seconds),
                _fmt(r.per_token_microseconds), str(r.scratch_bytes),
            ]))
            fh.write("\n")
