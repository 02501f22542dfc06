"""Dense feature matrices, label vectors and box constraints.

Matrices are plain ``float64`` numpy arrays of shape ``(n, d)``; label vectors
are ``int64`` arrays of shape ``(n,)``.  The loaders validate on the way in so
the rest of the package can assume finite, rectangular data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input file or array."""


@dataclass(frozen=True)
class BoxBounds:
    """Valid value range of a single feature entry (e.g. ``[0, 255]`` for pixels)."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DataError(f"box bounds need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


def as_matrix(values) -> np.ndarray:
    """Validate ``values`` as a finite, non-empty 2-D matrix and return a read-only copy."""
    m = np.array(values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DataError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    bad = np.argwhere(~np.isfinite(m))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"non-finite value at row {r + 1}, column {c + 1}")
    m.setflags(write=False)
    return m


def as_labels(values, n: int | None = None) -> np.ndarray:
    labels = np.array(values)
    if labels.ndim != 1 or labels.size == 0:
        raise DataError(f"expected a non-empty 1-D label vector, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        as_int = labels.astype(np.int64)
        if not np.array_equal(as_int, labels):
            raise DataError("labels must be integers")
        labels = as_int
    labels = labels.astype(np.int64)
    if labels.min() < 0:
        raise DataError("labels must be non-negative")
    if n is not None and labels.size != n:
        raise DataError(f"label vector has length {labels.size}, matrix has {n} rows")
    labels.setflags(write=False)
    return labels


def n_clusters(labels) -> int:
    """Number of distinct labels; always recomputed, never stored."""
    return int(np.unique(labels).size)


def canonical_labels(labels) -> np.ndarray:
    """Relabel so cluster ids appear in order of first occurrence (0, 1, 2, ...)."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].astype(np.int64)


def _delimiter(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() == ".tsv" else "csv"
    if fmt not in ("csv", "tsv"):
        raise DataError(f"unknown matrix format {fmt!r}")
    return "\t" if fmt == "tsv" else ","


def load_matrix(path, fmt: str | None = None) -> np.ndarray:
    """Read a header-less CSV/TSV file of numbers into a validated matrix.

    ``fmt`` defaults to the file suffix (``.tsv`` means tab separated,
    anything else comma separated).  Errors name the offending row and
    column, both 1-based.
    """
    path = Path(path)
    delim = _delimiter(path, fmt)
    rows = []
    width = None
    with open(path, newline="") as fh:
        for r, record in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not record or all(not f.strip() for f in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise DataError(
                    f"{path}: ragged row {r}: expected {width} fields, got {len(record)}"
                )
            row = []
            for c, field in enumerate(record, start=1):
                try:
                    v = float(field)
                except ValueError:
                    raise DataError(f"{path}: unparsable value {field!r} at row {r}, column {c}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value {field!r} at row {r}, column {c}")
                row.append(v)
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    return as_matrix(rows)


def save_matrix(m, path, fmt: str | None = None) -> None:
    """Write ``m`` with 17 significant digits so a reload is bit-exact."""
    path = Path(path)
    delim = _delimiter(path, fmt)
    m = np.asarray(m, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        for row in m:
            fh.write(delim.join(f"{v:.17g}" for v in row))
            fh.write("\n")


def load_labels(path) -> np.ndarray:
    """One non-negative integer per line; blank trailing lines are ignored."""
    path = Path(path)
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                out.append(int(text))
            except ValueError:
                raise DataError(f"{path}: non-integer label {text!r} at line {i}") from None
    if not out:
        raise DataError(f"{path}: empty label file")
    return as_labels(out)


def save_labels(labels, path) -> None:
    with open(path, "w", newline="") as fh:
        for v in np.asarray(labels, dtype=np.int64):
            fh.write(f"{int(v)}\n")


def clamp_to_box(m, box: BoxBounds | None) -> np.ndarray:
    if box is None:
        return np.asarray(m, dtype=np.float64)
    return np.clip(np.asarray(m, dtype=np.float64), box.lo, box.hi)


def two_blobs(n: int = 200, d: int = 2, gap: float = 4.0, spread: float = 1.0, seed: int = 0):
    """Two isotropic Gaussian blobs whose centres are ``gap`` apart on the first axis.

    Returns ``(X, truth)`` with the first ``n // 2`` rows in blob 0.
    """
    rng = np.random.default_rng(seed)
    n0 = n // 2
    centres = np.zeros((2, d))
    centres[1, 0] = gap
    X = rng.normal(scale=spread, size=(n, d))
    X[:n0] += centres[0]
    X[n0:] += centres[1]
    truth = np.r_[np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)]
    return as_matrix(X), as_labels(truth)


def load_digits_subset(classes=(8, 9)):
    """UCI optical digits (the copy bundled with scikit-learn), restricted to ``classes``.

    Returns ``(X, truth)`` where ``truth`` holds the original digit labels.
    Pixel intensities lie in ``[0, 16]``.
    """
    from sklearn.datasets import load_digits

    data = load_digits()
    keep = np.isin(data.target, list(classes))
    return as_matrix(data.data[keep]), as_labels(data.target[keep])
