"""Sparse kernels over CBSR inputs, the cell-side max merge, and dense oracles.

Forward (``dr_spmm_forward``) computes ``Y = A @ densify(X)`` while reading only
the ``k`` kept entries per source row.  Backward (``dr_spmm_backward``) is the
sampled product ``(A^T @ dY)`` evaluated only at the forward-kept coordinates.

Both kernels parallelise over disjoint output rows (destination rows forward,
source rows backward), so no atomic updates are needed and results do not
depend on the worker count.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .drelu import CbsrMatrix
from .errors import PlanMismatch, ShapeMismatch, TapeMismatch
from .partition import PartitionPlan, plan_for


@njit(nogil=True, cache=True)
def _forward_rows(row_ptr, col_idx, a_val, x_idx, x_val,
                  task_ptr, task_start, task_len, r0, r1, out):
    for i in range(r0, r1):
        for t in range(task_ptr[i], task_ptr[i + 1]):
            s = task_start[t]
            e = s + task_len[t]
            for p in range(row_ptr[i], row_ptr[i + 1]):
                j = col_idx[p]
                a = a_val[p]
                for q in range(s, e):
                    out[i, x_idx[j, q]] += a * x_val[j, q]


@njit(nogil=True, cache=True)
def _backward_rows(t_row_ptr, t_col_idx, t_val, dy, x_idx,
                   task_ptr, task_start, task_len, r0, r1, out):
    for j in range(r0, r1):
        for t in range(task_ptr[j], task_ptr[j + 1]):
            s = task_start[t]
            e = s + task_len[t]
            for p in range(t_row_ptr[j], t_row_ptr[j + 1]):
                i = t_col_idx[p]
                a = t_val[p]
                for q in range(s, e):
                    out[j, q] += a * dy[i, x_idx[j, q]]


_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def shared_pool(workers: int) -> ThreadPoolExecutor:
    """Process-wide kernel pool of the given size, created on first use."""
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(workers, thread_name_prefix=f"hcg-k{workers}")
        return pool


def _run_rows(kernel, args, plan: PartitionPlan, out, workers: int, pool=None):
    if workers <= 1 and pool is None:
        kernel(*args, 0, plan.num_rows, out)
        return out
    pool = pool or shared_pool(workers)
    futs = [pool.submit(kernel, *args, r0, r1, out) for r0, r1 in plan.row_ranges(4 * max(workers, 1))]
    for f in futs:
        f.result()
    return out


@dataclass(frozen=True, eq=False)
class MergeMask:
    bits: np.ndarray  # bool, True where the near path won (ties included)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


@dataclass(frozen=True, eq=False)
class LayerTape:
    """Forward artifacts reused by the backward pass."""

    cbsr: dict                 # edge type -> CbsrMatrix fed to that edge's SpMM
    mask: MergeMask | None
    adj: dict = field(default_factory=dict)
    adj_t: dict = field(default_factory=dict)
    aggregated: dict = field(default_factory=dict)  # edge type -> A @ densify(X), pre-weight


def spmm_oracle(a, x: np.ndarray) -> np.ndarray:
    """Reference ``A @ X`` accumulating each row's neighbours in column order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or a.num_cols != x.shape[0]:
        raise ShapeMismatch(f"A is {a.shape}, X is {x.shape}")
    y = np.zeros((a.num_rows, x.shape[1]))
    rp, ci, v = a.row_ptr, a.col_idx, a.values
    for i in range(a.num_rows):
        acc = np.zeros(x.shape[1])
        for p in range(rp[i], rp[i + 1]):
            acc += v[p] * x[ci[p]]
        y[i] = acc
    return y


def dr_spmm_forward(a, x: CbsrMatrix, plan: PartitionPlan | None = None,
                    workers: int = 1, pool=None) -> np.ndarray:
    """``A @ densify(x)`` reading only kept entries; output is (rows, x.dim)."""
    if a.num_cols != x.num_rows:
        raise ShapeMismatch(f"A has {a.num_cols} columns but X has {x.num_rows} rows")
    if plan is None:
        plan = plan_for(a, x.k, x.dim)
    if plan.num_rows != a.num_rows or plan.width != x.k:
        raise PlanMismatch(
            f"plan is for {plan.num_rows} rows x width {plan.width}, "
            f"kernel needs {a.num_rows} x {x.k}"
        )
    out = np.zeros((a.num_rows, x.dim))
    args = (a.row_ptr, a.col_idx, a.values, x.indices, x.values,
            plan.task_ptr, plan.task_start, plan.task_len)
    return _run_rows(_forward_rows, args, plan, out, workers, pool)


def sspmm(a_t, dy: np.ndarray, x: CbsrMatrix, plan: PartitionPlan | None = None,
          workers: int = 1, pool=None) -> np.ndarray:
    """``(A^T @ dy)[j, x.indices[j, t]]`` for every source row j and kept slot t."""
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    if a_t.num_rows != x.num_rows:
        raise TapeMismatch(f"A^T has {a_t.num_rows} rows but the CBSR tape has {x.num_rows}")
    if dy.shape != (a_t.num_cols, x.dim):
        raise ShapeMismatch(f"dy is {dy.shape}, expected ({a_t.num_cols}, {x.dim})")
    if plan is None:
        plan = plan_for(a_t, x.k, x.dim)
    if plan.num_rows != a_t.num_rows or plan.width != x.k:
        raise PlanMismatch(
            f"plan is for {plan.num_rows} rows x width {plan.width}, "
            f"kernel needs {a_t.num_rows} x {x.k}"
        )
    out = np.zeros((x.num_rows, x.k))
    args = (a_t.row_ptr, a_t.col_idx, a_t.values, dy, x.indices,
            plan.task_ptr, plan.task_start, plan.task_len)
    return _run_rows(_backward_rows, args, plan, out, workers, pool)


def dr_spmm_backward(a_t, dy: np.ndarray, tape: LayerTape, edge_type: str,
                     plan: PartitionPlan | None = None, workers: int = 1, pool=None) -> np.ndarray:
    """Gradient at the forward-kept positions of ``edge_type``'s source CBSR."""
    try:
        x = tape.cbsr[edge_type]
    except KeyError:
        raise TapeMismatch(f"tape holds no CBSR for edge type {edge_type!r}") from None
    return sspmm(a_t, dy, x, plan, workers, pool)


def max_merge(y_near: np.ndarray, y_pinned: np.ndarray) -> tuple[np.ndarray, MergeMask]:
    if y_near.shape != y_pinned.shape:
        raise ShapeMismatch(f"{y_near.shape} vs {y_pinned.shape}")
    bits = y_near >= y_pinned
    return np.where(bits, y_near, y_pinned), MergeMask(bits)


def max_merge_backward(d_cell: np.ndarray, m: MergeMask) -> tuple[np.ndarray, np.ndarray]:
    if d_cell.shape != m.shape:
        raise ShapeMismatch(f"gradient {d_cell.shape} vs mask {m.shape}")
    return np.where(m.bits, d_cell, 0.0), np.where(m.bits, 0.0, d_cell)


@dataclass(frozen=True)
class Workload:
    per_row: np.ndarray
    max_row: int
    mean_row: float
    p_max: int
    t_avail: int


def estimate_workload(a, d: int, t_avail: int = 64) -> Workload:
    """Row workloads ``degree * d`` and the parallel-product bound P_max.

    P_max = min(floor(t_avail / (max_degree * d)), num_rows), at least 1.
    """
    if d < 1 or t_avail < 1:
        raise ValueError("d and t_avail must be >= 1")
    w = a.degrees() * d
    top = int(w.max()) if w.size else 0
    p_max = a.num_rows if top == 0 else min(t_avail // top, a.num_rows)
    return Workload(w, top, float(w.mean()) if w.size else 0.0, max(int(p_max), 1), t_avail)
