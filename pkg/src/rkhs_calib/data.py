"""Physical datasets and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError


@dataclass(frozen=True)
class PhysicalDataset:
    """Design points ``x`` (n, d) with noisy responses ``y`` (n, r).

    ``lower``/``upper`` bound the control-variable domain.
    """

    x: np.ndarray
    y: np.ndarray
    lower: np.ndarray = field(default=None)
    upper: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} design points but {y.shape[0]} responses")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("non-finite values in physical data")
        lo = x.min(axis=0) if self.lower is None else np.atleast_1d(np.asarray(self.lower, float))
        hi = x.max(axis=0) if self.upper is None else np.atleast_1d(np.asarray(self.upper, float))
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise DomainError("design points outside the stated domain")
        for name, val in (("x", x), ("y", y), ("lower", lo), ("upper", hi)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return self.y.shape[1]

    @property
    def domain(self) -> tuple[float, float]:
        """Interval of the first control variable."""
        return float(self.lower[0]), float(self.upper[0])

    def subset(self, idx) -> "PhysicalDataset":
        idx = np.asarray(idx)
        return PhysicalDataset(self.x[idx], self.y[idx], self.lower, self.upper)

    def with_responses(self, y) -> "PhysicalDataset":
        return PhysicalDataset(self.x, y, self.lower, self.upper)


def read_table(path, prefixes: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Read a numeric CSV whose header columns are ``<prefix><index>``.

    Columns must appear grouped by prefix in the given order, each group
    numbered from 1 (e.g. ``x1,x2,t1,y1``).  Returns one ``(rows, k)`` array
    per prefix; groups may be empty only if the prefix is ``"t"``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = []
        counts = {}
        for p in prefixes:
            k = 0
            while len(expected) < len(header) and header[len(expected)] == f"{p}{k + 1}":
                expected.append(f"{p}{k + 1}")
                k += 1
            counts[p] = k
        if expected != header or any(counts[p] == 0 for p in prefixes if p != "t"):
            want = ",".join(f"{p}1,...,{p}k" for p in prefixes)
            raise DataError(f"{path}: malformed header {','.join(header)!r}; expected {want}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: NaN or Inf value")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    out, start = {}, 0
    for p in prefixes:
        out[p] = arr[:, start : start + counts[p]]
        start += counts[p]
    return out


def read_physical(path, lower=None, upper=None) -> PhysicalDataset:
    """Load ``x1,...,xd,y1,...,yr`` rows."""
    cols = read_table(path, ("x", "y"))
    return PhysicalDataset(cols["x"], cols["y"], lower, upper)


def read_runs(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load computer-experiment rows ``x1..xd,t1..tq,y1..yr`` as ``(x, t, y)``."""
    cols = read_table(path, ("x", "t", "y"))
    if cols["t"].shape[1] == 0:
        raise DataError(f"{path}: no calibration-parameter columns t1,...")
    return cols["x"], cols["t"], cols["y"]


def write_physical(path, data: PhysicalDataset) -> None:
    header = [f"x{i + 1}" for i in range(data.d)] + [f"y{i + 1}" for i in range(data.r)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in (*xi, *yi)])
