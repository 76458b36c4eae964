"""Allocation accounting for scratch buffers.

Kernels route their temporary allocations through :func:`empty` / :func:`zeros`
so a benchmark can meter how much working memory a pass requests. When no
meter is active the helpers are plain ``np.empty`` / ``np.zeros``. Returned
output arrays (attention outputs, gradients) are allocated directly by the
kernels and are deliberately not counted.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator

import numpy as np

_lock = threading.Lock()
_meters: list["ScratchMeter"] = []


class ScratchMeter:
    """Accumulates the bytes of scratch allocated while it is active."""

    def __init__(self) -> None:
        self.bytes_allocated = 0


@contextmanager
def measure() -> Iterator[ScratchMeter]:
    """Meter every scratch allocation made inside the block (thread-safe)."""
    meter = ScratchMeter()
    with _lock:
        _meters.append(meter)
    try:
        yield meter
    finally:
        with _lock:
            _meters.remove(meter)


def _record(nbytes: int) -> None:
    if _meters:
        with _lock:
            for meter in _meters:
                meter.bytes_allocated += nbytes


def empty(shape, dtype) -> np.ndarray:
    arr = np.empty(shape, dtype)
    _record(arr.nbytes)
    return arr


def zeros(shape, dtype) -> np.ndarray:
    arr = np.zeros(shape, dtype)
    _record(arr.nbytes)
    return arr
