"""Dense-matrix substrate: precision handling, seeded fixtures, text fixture I/O.

Matrices are plain 2-D numpy arrays in float32 ("single") or float64
("double"). The text fixture format is one header line ``rows cols precision``
followed by one whitespace-separated row per line, printed with enough digits
that the round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISIONS = ("single", "double")

_DTYPES = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}
_ROW_FORMATS = {"single": "%.9g", "double": "%.17g"}


class FixtureFormatError(ValueError):
    """Raised when a fixture file cannot be parsed; message names the line."""


def dtype_for(precision: str) -> np.dtype:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {PRECISIONS}") from None


def precision_of(a: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if a.dtype == dt:
            return name
    raise ValueError(f"unsupported dtype {a.dtype}, expected float32 or float64")


@dataclass(frozen=True)
class AttentionConfig:
    """Problem shape for one attention pass.

    ``dv`` (value/output width) defaults to ``d``; ``block`` may exceed ``n``,
    in which case a pass runs as a single partial block.
    """

    n: int
    d: int
    block: int
    lam: float
    precision: str = "double"
    dv: int | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.block < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"decay rate must be in (0, 1], got {self.lam}")
        dtype_for(self.precision)
        if self.dv is None:
            object.__setattr__(self, "dv", self.d)
        elif self.dv < 1:
            raise ValueError(f"dv must be >= 1, got {self.dv}")


def random_matrix(rows: int, cols: int, seed: int, precision: str = "double") -> np.ndarray:
    """Seeded fixture matrix with i.i.d. uniform entries in [-1, 1].

    A pure function of (rows, cols, seed, precision): the same arguments
    always reproduce bit-identical data.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got {rows}x{cols}")
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    rng = np.random.default_rng(seed)
    data = rng.uniform(-1.0, 1.0, size=(rows, cols))
    return data.astype(dtype_for(precision), copy=False)


def save_fixture(m: np.ndarray, path) -> None:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"fixtures are 2-D matrices, got ndim={arr.ndim}")
    precision = precision_of(arr)
    fmt = _ROW_FORMATS[precision]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{arr.shape[0]} {arr.shape[1]} {precision}\n")
        for row in arr:
            fh.write(" ".join(fmt % x for x in row))
            fh.write("\n")


def load_fixture(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    if not lines or not lines[0].strip():
        raise FixtureFormatError("line 1: missing header")
    header = lines[0].split()
    if len(header) != 3:
        raise FixtureFormatError(
            f"line 1: malformed header {lines[0]!r}, expected 'rows cols precision'"
        )
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError:
        raise FixtureFormatError(f"line 1: malformed header {lines[0]!r}") from None
    if header[2] not in _DTYPES:
        raise FixtureFormatError(f"line 1: unknown precision {header[2]!r}")
    if rows < 1 or cols < 1:
        raise FixtureFormatError(f"line 1: invalid shape {rows}x{cols}")

    data = np.empty((rows, cols), _DTYPES[header[2]])
    body = lines[1:]
    for i in range(rows):
        lineno = i + 2
        if i >= len(body) or not body[i].strip():
            raise FixtureFormatError(f"line {lineno}: expected {rows} data rows, file ends early")
        tokens = body[i].split()
        if len(tokens) != cols:
            raise FixtureFormatError(
                f"line {lineno}: expected {cols} values, got {len(tokens)}"
            )
        for j, tok in enumerate(tokens):
            try:
                val = float(tok)
            except ValueError:
                raise FixtureFormatError(f"line {lineno}: unparseable value {tok!r}") from None
            if not np.isfinite(val):
                raise FixtureFormatError(f"line {lineno}: non-finite value {tok!r}")
            data[i, j] = val
    for extra in body[rows:]:
        if extra.strip():
            raise FixtureFormatError(f"line {rows + 2}: trailing data beyond declared {rows} rows")
    return data
