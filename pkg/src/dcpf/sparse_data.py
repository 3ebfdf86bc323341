"""Sparse count matrices: loading, validation, splitting and summary statistics.

Indices are 0-based everywhere. Entries are kept sorted by (row, col).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_HEADER = re.compile(r"#\s*rows\s*=\s*(\d+)\s+cols\s*=\s*(\d+)")


class DataError(ValueError):
    """Raised when count data violates the matrix invariants."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseCountMatrix:
    """COO store of strictly positive integer counts.

    Zeros are implicit. Construction validates bounds, positivity and
    uniqueness and sorts entries by (row, col).
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values).reshape(-1)
        if not (rows.shape == cols.shape == vals.shape):
            raise DataError("rows, cols and values must have the same length")
        if self.n_rows < 0 or self.n_cols < 0:
            raise DataError("negative dimensions")
        if vals.size:
            if not np.all(np.equal(np.mod(vals, 1), 0)):
                raise DataError("counts must be integers")
            vals = vals.astype(np.int64)
            if vals.min() < 1:
                raise DataError("counts must be >= 1 (zeros are implicit)")
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise DataError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise DataError("col index out of range")
        else:
            vals = vals.astype(np.int64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                j = int(np.flatnonzero(dup)[0])
                raise DataError(f"duplicate entry ({rows[j]}, {cols[j]})")
        object.__setattr__(self, "n_rows", int(self.n_rows))
        object.__setattr__(self, "n_cols", int(self.n_cols))
        object.__setattr__(self, "rows", _frozen(rows, np.int64))
        object.__setattr__(self, "cols", _frozen(cols, np.int64))
        object.__setattr__(self, "values", _frozen(vals, np.int64))

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def entries(self) -> list[tuple[int, int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int64)
        out[self.rows, self.cols] = self.values
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix(
            (self.values.astype(float), (self.rows, self.cols)), shape=self.shape
        )

    def row_degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_degrees(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    def __eq__(self, other):
        if not isinstance(other, SparseCountMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @classmethod
    def from_dense(cls, dense) -> "SparseCountMatrix":
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def from_entries(cls, entries, n_rows=None, n_cols=None) -> "SparseCountMatrix":
        entries = list(entries)
        if entries:
            r, c, v = (np.array(x) for x in zip(*entries))
        else:
            r = c = v = np.zeros(0, dtype=np.int64)
        if n_rows is None:
            n_rows = int(r.max()) + 1 if r.size else 0
        if n_cols is None:
            n_cols = int(c.max()) + 1 if c.size else 0
        return cls(n_rows, n_cols, r, c, v)


@dataclass(frozen=True)
class SplitPair:
    train: SparseCountMatrix
    test: SparseCountMatrix
    seed: int


def _separator(fmt: str | None, path: Path) -> str | None:
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "tsv"
    if fmt == "csv":
        return ","
    if fmt == "tsv":
        return None  # any run of whitespace
    raise ValueError(f"unknown format {fmt!r}")


def load_triplets(path, format: str | None = None) -> SparseCountMatrix:
    """Read "row<sep>col<sep>count" lines.

    An optional first line ``# rows=U cols=I`` fixes the dimensions;
    otherwise they are inferred as max index + 1.
    """
    path = Path(path)
    sep = _separator(format, path)
    rows, cols, vals = [], [], []
    seen = set()
    n_rows = n_cols = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                m = _HEADER.match(s)
                if m and not rows:
                    n_rows, n_cols = int(m.group(1)), int(m.group(2))
                continue
            parts = [p.strip() for p in s.split(sep)]
            if len(parts) != 3:
                raise DataError(f"malformed line {lineno}: {s!r}")
            try:
                r, c, v = (int(p) for p in parts)
            except ValueError:
                raise DataError(f"malformed line {lineno}: {s!r}") from None
            if r < 0 or c < 0:
                raise DataError(f"negative index at line {lineno}")
            if v == 0:
                raise DataError(f"zero count at line {lineno}")
            if v < 0:
                raise DataError(f"negative count at line {lineno}")
            if (r, c) in seen:
                raise DataError(f"duplicate pair ({r}, {c}) at line {lineno}")
            seen.add((r, c))
            rows.append(r)
            cols.append(c)
            vals.append(v)
    if not rows:
        raise DataError("no entries")
    if n_rows is None:
        n_rows = max(rows) + 1
        n_cols = max(cols) + 1
    return SparseCountMatrix(n_rows, n_cols, rows, cols, vals)


def save_triplets(matrix: SparseCountMatrix, path, format: str | None = None) -> None:
    path = Path(path)
    sep = _separator(format, path) or "\t"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# rows={matrix.n_rows} cols={matrix.n_cols}\n")
        for r, c, v in zip(matrix.rows.tolist(), matrix.cols.tolist(), matrix.values.tolist()):
            fh.write(f"{r}{sep}{c}{sep}{v}\n")


def _subset(matrix: SparseCountMatrix, idx) -> SparseCountMatrix:
    return SparseCountMatrix(
        matrix.n_rows, matrix.n_cols, matrix.rows[idx], matrix.cols[idx], matrix.values[idx]
    )


def split(matrix: SparseCountMatrix, fraction: float = 0.2, seed: int = 0) -> SplitPair:
    """Hold out ``floor(fraction * nnz)`` uniformly chosen entries as the test set."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(matrix.nnz)
    n_test = int(np.floor(fraction * matrix.nnz))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return SplitPair(_subset(matrix, train_idx), _subset(matrix, test_idx), seed)


def binarize(matrix: SparseCountMatrix) -> SparseCountMatrix:
    return SparseCountMatrix(
        matrix.n_rows, matrix.n_cols, matrix.rows, matrix.cols, np.ones(matrix.nnz, dtype=np.int64)
    )


def dispersion_stats(matrix: SparseCountMatrix) -> dict:
    """Mean, unbiased variance and var/mean ratio of the stored counts, plus density."""
    if matrix.nnz < 2:
        raise DataError("need at least 2 nonzero entries")
    v = matrix.values.astype(float)
    mean = float(v.mean())
    var = float(v.var(ddof=1))
    return {
        "mean": mean,
        "variance": var,
        "ratio": var / mean,
        "nnz_fraction": matrix.nnz / (matrix.n_rows * matrix.n_cols),
    }


def filter_min_degree(
    matrix: SparseCountMatrix,
    min_degree: int = 20,
    fixed_point: bool = True,
    compact: bool = True,
):
    """Keep rows and columns with more than ``min_degree`` entries.

    With ``fixed_point`` the filter is repeated until nothing changes.
    Returns ``(matrix, row_ids, col_ids)`` where the id arrays map new
    indices back to the original ones.
    """
    keep = np.ones(matrix.nnz, dtype=bool)
    while True:
        rdeg = np.bincount(matrix.rows[keep], minlength=matrix.n_rows)
        cdeg = np.bincount(matrix.cols[keep], minlength=matrix.n_cols)
        new = keep & (rdeg[matrix.rows] > min_degree) & (cdeg[matrix.cols] > min_degree)
        changed = new.sum() != keep.sum()
        keep = new
        if not fixed_point or not changed:
            break
    rows, cols, vals = matrix.rows[keep], matrix.cols[keep], matrix.values[keep]
    if not compact:
        return (
            SparseCountMatrix(matrix.n_rows, matrix.n_cols, rows, cols, vals),
            np.arange(matrix.n_rows),
            np.arange(matrix.n_cols),
        )
    row_ids, new_rows = np.unique(rows, return_inverse=True)
    col_ids, new_cols = np.unique(cols, return_inverse=True)
    logger.info("filter kept %d/%d rows, %d/%d cols", row_ids.size, matrix.n_rows, col_ids.size, matrix.n_cols)
    out = SparseCountMatrix(row_ids.size, col_ids.size, new_rows, new_cols, vals)
    return out, row_ids, col_ids
