"""Error metrics, a finite-difference gradient oracle, and the gating suites.

The equivalence suite runs every implementation of the forward pass (masked
left product, per-token recurrence, tiled, streaming) plus both backward
paths over a seeded grid of shapes and decay rates, and reports worst-case
elementwise relative error per comparison. The gradcheck suite compares the
tiled backward pass against central finite differences on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kernel import chunked_forward, tiled_backward, tiled_forward
from .matrix import random_matrix
from .reference import (
    GradBundle,
    KvState,
    oracle_backward,
    oracle_forward,
    recurrent_forward,
)

REL_FLOOR = 1e-12
GRADCHECK_MAX_N = 24
GRADCHECK_MAX_D = 6


@dataclass
class ErrorReport:
    """Worst-element comparison of a candidate matrix against a reference."""

    max_abs_error: float
    max_rel_error: float
    location: tuple[int, int]
    passed: bool
    label: str = ""

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{self.label or 'compare'}: max_rel={self.max_rel_error:.3e} "
            f"max_abs={self.max_abs_error:.3e} at {self.location} [{verdict}]"
        )


def compare(candidate, reference, tolerance: float, label: str = "") -> ErrorReport:
    """Worst absolute deviation measured against the reference's magnitude.

    max_rel_error = max|candidate - reference| / max(|reference|, 1e-12),
    the floor guarding against an all-zero reference. The reference argument
    is normative: swapping the arguments changes the denominator. A strictly
    per-element ratio is deliberately not used; outputs can legitimately be
    near zero through random sign cancellation, where any reassociated
    computation carries absolute rounding noise that dwarfs the element.
    """
    cand = np.asarray(candidate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if cand.shape != ref.shape:
        raise ValueError(f"shape mismatch: candidate {cand.shape} vs reference {ref.shape}")
    diff = np.abs(cand - ref)
    denom = max(float(np.max(np.abs(ref))) if ref.size else 0.0, REL_FLOOR)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.size else (0, 0)
    max_abs = float(diff[worst]) if diff.size else 0.0
    max_rel = max_abs / denom
    return ErrorReport(
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        location=(int(worst[0]), int(worst[1])) if len(worst) == 2 else (int(worst[0]), 0),
        passed=bool(max_rel <= tolerance),
        label=label,
    )


def finite_diff_grads(q, k, v, d_out, lam: float, eps: float = 1e-6) -> GradBundle:
    """Central-difference gradients of <d_out, oracle_forward(q, k, v, lam)>.

    Perturbs one input entry at a time by +/- eps. Double precision only:
    the truncation/round-off balance at eps=1e-6 is meaningless in float32.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    arrs = [np.asarray(a) for a in (q, k, v, d_out)]
    for a in arrs:
        if a.dtype != np.float64:
            raise ValueError("finite differences require double precision inputs")
    q, k, v, d_out = (a.copy() for a in arrs)

    def loss() -> float:
        return float(np.sum(d_out * oracle_forward(q, k, v, lam)))

    def grad_of(x: np.ndarray) -> np.ndarray:
        g = np.empty_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss()
            flat[i] = orig - eps
            minus = loss()
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        return g

    return GradBundle(grad_of(q), grad_of(k), grad_of(v))


class GridCase(NamedTuple):
    n: int
    d: int
    dv: int
    block: int
    lam: float
    seed: int


@dataclass
class SuiteConfig:
    cases: list[GridCase]
    tolerance: float = 1e-10
    precision: str = "double"


def default_grid() -> SuiteConfig:
    """The normative equivalence grid; roughly 1.5k cases, all double."""
    cases = [
        GridCase(n, d, dv, block, lam, seed)
        for n in (1, 2, 7, 16, 33, 64, 100, 256)
        for d in (1, 4, 32)
        for dv in (d, d + 3)
        for block in (1, 4, 16, 64)
        for lam in (0.5, 0.9, 0.999, 1.0)
        for seed in (0, 1)
    ]
    return SuiteConfig(cases=cases, tolerance=1e-10, precision="double")


def small_grid() -> SuiteConfig:
    """Trimmed grid for pre-commit runs; finishes in a few seconds."""
    cases = [
        GridCase(n, d, dv, block, lam, seed)
        for n in (1, 2, 7, 16, 33)
        for d in (1, 4)
        for dv in (d, d + 3)
        for block in (1, 4, 16)
        for lam in (0.5, 1.0)
        for seed in (0,)
    ]
    return SuiteConfig(cases=cases, tolerance=1e-10, precision="double")


def default_gradcheck_grid() -> SuiteConfig:
    """Small instances only; finite differences cost O(n*d) forward passes."""
    cases = [
        GridCase(n, d, dv, block, lam, seed)
        for n in (1, 2, 7, 12, 24)
        for d in (1, 4, 6)
        for dv in (d, d + 2)
        for block in (1, 5, 32)
        for lam in (0.5, 0.8, 1.0)
        for seed in (3,)
    ]
    return SuiteConfig(cases=cases, tolerance=1e-5, precision="double")


def case_inputs(case: GridCase, precision: str):
    """Deterministic q, k, v, d_out fixtures for one grid case."""
    base = int(case.seed) * 10
    q = random_matrix(case.n, case.d, base + 0, precision)
    k = random_matrix(case.n, case.d, base + 1, precision)
    v = random_matrix(case.n, case.dv, base + 2, precision)
    d_out = random_matrix(case.n, case.dv, base + 3, precision)
    return q, k, v, d_out


def ragged_partition(n: int, seed: int) -> list[int]:
    """Deterministic ragged chunk lengths summing to n."""
    rng = np.random.default_rng([seed, n])
    parts: list[int] = []
    remaining = n
    while remaining > 0:
        hi = max(1, min(remaining, n // 3 + 1))
        take = int(rng.integers(1, hi + 1))
        parts.append(take)
        remaining -= take
    return parts


def _chunked_over_partition(q, k, v, lam, block, parts):
    d, dv = q.shape[1], v.shape[1]
    state = KvState.fresh(d, dv, q.dtype)
    outs = []
    start = 0
    for length in parts:
        stop = start + length
        o, state = chunked_forward(q[start:stop], k[start:stop], v[start:stop], lam, block, state)
        outs.append(o)
        start = stop
    return np.concatenate(outs, axis=0), state


def _case_tag(case: GridCase) -> str:
    return (
        f"(n={case.n} d={case.d} dv={case.dv} B={case.block} "
        f"lam={case.lam} seed={case.seed})"
    )


def run_equivalence_suite(cfg: SuiteConfig) -> list[ErrorReport]:
    """All forward paths against the masked-product oracle, plus both backward
    paths, for every grid case. Failures are reported, never raised."""
    tol = cfg.tolerance
    reports: list[ErrorReport] = []
    for case in cfg.cases:
        q, k, v, d_out = case_inputs(case, cfg.precision)
        tag = _case_tag(case)

        o_oracle = oracle_forward(q, k, v, case.lam)
        o_rec, _ = recurrent_forward(q, k, v, case.lam)
        o_tiled = tiled_forward(q, k, v, case.lam, case.block).o
        o_chunk, _ = _chunked_over_partition(
            q, k, v, case.lam, case.block, ragged_partition(case.n, case.seed)
        )
        reports.append(compare(o_rec, o_oracle, tol, f"recurrent vs oracle {tag}"))
        reports.append(compare(o_tiled, o_oracle, tol, f"tiled vs oracle {tag}"))
        reports.append(compare(o_chunk, o_oracle, tol, f"chunked vs oracle {tag}"))
        reports.append(compare(o_tiled, o_rec, tol, f"tiled vs recurrent {tag}"))

        g_oracle = oracle_backward(q, k, v, d_out, case.lam)
        g_tiled = tiled_backward(q, k, v, d_out, case.lam, case.block)
        reports.append(compare(g_tiled.dq, g_oracle.dq, tol, f"tiled dq vs oracle {tag}"))
        reports.append(compare(g_tiled.dk, g_oracle.dk, tol, f"tiled dk vs oracle {tag}"))
        reports.append(compare(g_tiled.dv, g_oracle.dv, tol, f"tiled dv vs oracle {tag}"))
    return reports


def run_gradcheck_suite(cfg: SuiteConfig, eps: float = 1e-6) -> list[ErrorReport]:
    """Tiled backward against central finite differences on every grid case.

    Rejects cases beyond n=24 or d=6 up front; the cost per case is
    O(n*d) full forward passes per input matrix.
    """
    if cfg.precision != "double":
        raise ValueError("gradcheck runs in double precision only")
    for case in cfg.cases:
        if case.n > GRADCHECK_MAX_N or case.d > GRADCHECK_MAX_D:
            raise ValueError(
                f"gradcheck size cap exceeded by {_case_tag(case)}: "
                f"requires n <= {GRADCHECK_MAX_N} and d <= {GRADCHECK_MAX_D}"
            )
    reports: list[ErrorReport] = []
    for case in cfg.cases:
        q, k, v, d_out = case_inputs(case, cfg.precision)
        tag = _case_tag(case)
        g_fd = finite_diff_grads(q, k, v, d_out, case.lam, eps)
        g_tiled = tiled_backward(q, k, v, d_out, case.lam, case.block)
        reports.append(compare(g_tiled.dq, g_fd.dq, cfg.tolerance, f"tiled dq vs fdiff {tag}"))
        reports.append(compare(g_tiled.dk, g_fd.dk, cfg.tolerance, f"tiled dk vs fdiff {tag}"))
        reports.append(compare(g_tiled.dv, g_fd.dv, cfg.tolerance, f"tiled dv vs fdiff {tag}"))
    return reports


def worst_report(reports: list[ErrorReport]) -> ErrorReport | None:
    if not reports:
        return None
    return max(reports, key=lambda r: r.max_rel_error)
