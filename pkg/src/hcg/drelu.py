"""Dynamic ReLU: keep the k largest entries of every row.

The output is a CBSR matrix (compressed balanced sparse row), which stores
exactly ``k`` (value, column) pairs per row with columns ascending.  Ties at
the threshold are broken toward the smallest column so that every row keeps
exactly ``k`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadK, ShapeMismatch

MODES = ("literal", "nonneg")
MAX_K = 64


@dataclass(frozen=True, eq=False)
class CbsrMatrix:
    num_rows: int
    dim: int
    k: int
    values: np.ndarray   # (num_rows, k) float64
    indices: np.ndarray  # (num_rows, k) int64, strictly increasing per row
    mode: str = "literal"

    def problems(self) -> list[str]:
        out = []
        if self.values.shape != (self.num_rows, self.k) or self.indices.shape != (self.num_rows, self.k):
            return ["values/indices shape does not match (num_rows, k)"]
        if not 1 <= self.k <= self.dim:
            out.append(f"k={self.k} outside [1, {self.dim}]")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.dim:
                out.append("index out of range")
            if self.k > 1 and np.any(np.diff(self.indices, axis=1) <= 0):
                out.append("indices not strictly increasing")
        return out


@dataclass(frozen=True)
class DreluConfig:
    k_cell: int
    k_net: int
    mode: str = "literal"

    def check(self, d_cell: int, d_net: int) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name, k, d in (("k_cell", self.k_cell, d_cell), ("k_net", self.k_net, d_net)):
            if not 1 <= k <= min(d, MAX_K):
                raise BadK(f"{name}={k} must lie in [1, min({d}, {MAX_K})]")


def _check_k(k: int, dim: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= dim:
        raise BadK(f"k={k!r} must be an integer in [1, {dim}]")


def row_threshold(row, k: int) -> float:
    """The k-th largest value of ``row`` (the smallest survivor)."""
    row = np.asarray(row, dtype=np.float64)
    _check_k(k, row.shape[0])
    d = row.shape[0]
    return float(np.partition(row, d - k)[d - k])


def drelu_forward(x: np.ndarray, k: int, mode: str = "literal") -> CbsrMatrix:
    """Row-wise top-k of ``x`` in CBSR form.

    ``literal`` copies survivors verbatim, so a row whose threshold is
    negative keeps negative values.  ``nonneg`` selects the same columns and
    then clamps the kept values at zero.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    _check_k(k, d)
    # stable sort on the negation: descending, equal values keep column order
    top = np.argsort(-x, axis=1, kind="stable")[:, :k]
    idx = np.sort(top, axis=1).astype(np.int64)
    vals = np.take_along_axis(x, idx, axis=1)
    if mode == "nonneg":
        vals = np.maximum(vals, 0.0)
    return CbsrMatrix(n, d, int(k), np.ascontiguousarray(vals), np.ascontiguousarray(idx), mode)


def drelu_backward(tape: CbsrMatrix, upstream: np.ndarray) -> np.ndarray:
    """Scatter a gradient given at kept positions back to dense (N, D).

    In ``nonneg`` mode kept entries that were clamped to zero pass no gradient.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (tape.num_rows, tape.k):
        raise ShapeMismatch(f"upstream {upstream.shape} != ({tape.num_rows}, {tape.k})")
    if tape.mode == "nonneg":
        upstream = np.where(tape.values > 0.0, upstream, 0.0)
    out = np.zeros((tape.num_rows, tape.dim))
    np.put_along_axis(out, tape.indices, upstream, axis=1)
    return out


def cbsr_to_dense(c: CbsrMatrix) -> np.ndarray:
    out = np.zeros((c.num_rows, c.dim))
    np.put_along_axis(out, c.indices, c.values, axis=1)
    return out
