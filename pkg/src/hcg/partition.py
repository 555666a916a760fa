"""Degree bucketing and row-task partition plans.

A plan splits every destination row into ``ceil(32 / K)`` feature-slice tasks,
where ``K`` depends on the row's degree bucket (K1 > K2 > K3, so high-degree
rows get more, narrower slices).  All tasks of one row are executed by the
same worker, which keeps the accumulation order of every output entry fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadK, BadThresholds

WARP = 32
LOW, MEDIUM, HIGH = 0, 1, 2
DEFAULT_THRESHOLDS = (32, 128)
DEFAULT_K_BY_BUCKET = (32, 16, 8)


@dataclass(frozen=True, eq=False)
class DegreeBuckets:
    thresholds: tuple
    tags: np.ndarray     # int8 per row: LOW / MEDIUM / HIGH
    degrees: np.ndarray  # int64 per row

    @property
    def num_rows(self) -> int:
        return int(self.tags.shape[0])

    def counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.tags, minlength=3)
        return int(c[LOW]), int(c[MEDIUM]), int(c[HIGH])


def bucket_rows(a, thresholds=DEFAULT_THRESHOLDS) -> DegreeBuckets:
    low_max, med_max = thresholds
    if not 0 <= low_max < med_max:
        raise BadThresholds(f"need 0 <= low_max < med_max, got {thresholds}")
    deg = a.degrees()
    tags = np.full(deg.shape, HIGH, dtype=np.int8)
    tags[deg <= med_max] = MEDIUM
    tags[deg <= low_max] = LOW
    return DegreeBuckets((int(low_max), int(med_max)), tags, deg)


def parts_for(k: int) -> int:
    return math.ceil(WARP / k)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    num_rows: int
    width: int            # kept positions per source row being sliced, i.e. CBSR k
    k_by_bucket: tuple | None
    task_ptr: np.ndarray  # (num_rows + 1,) offsets into the task arrays
    task_start: np.ndarray
    task_len: np.ndarray
    row_cost: np.ndarray  # degree * width + 1, used for balancing

    @property
    def n_tasks(self) -> int:
        return int(self.task_start.shape[0])

    @property
    def tasks(self) -> list[tuple[int, int, int]]:
        rows = np.repeat(np.arange(self.num_rows), np.diff(self.task_ptr))
        return list(zip(rows.tolist(), self.task_start.tolist(), self.task_len.tolist()))

    def row_ranges(self, n_chunks: int) -> list[tuple[int, int]]:
        """Contiguous row ranges of roughly equal total cost."""
        if n_chunks <= 1 or self.num_rows <= 1:
            return [(0, self.num_rows)]
        csum = np.cumsum(self.row_cost)
        cuts = np.searchsorted(csum, csum[-1] * np.arange(1, n_chunks) / n_chunks, side="right")
        bounds = np.unique(np.concatenate([[0], cuts, [self.num_rows]]))
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _slice_tasks(n_parts: np.ndarray, width: int):
    """Split [0, width) into n_parts[r] near-equal runs for every row r."""
    task_ptr = np.zeros(n_parts.shape[0] + 1, dtype=np.int64)
    np.cumsum(n_parts, out=task_ptr[1:])
    starts, lens = [], []
    for m in np.unique(n_parts):
        base, extra = divmod(width, int(m))
        ln = np.full(int(m), base, dtype=np.int64)
        ln[:extra] += 1
        st = np.concatenate([[0], np.cumsum(ln)[:-1]])
        starts.append((int(m), st, ln))
    task_start = np.empty(task_ptr[-1], dtype=np.int64)
    task_len = np.empty(task_ptr[-1], dtype=np.int64)
    for m, st, ln in starts:
        rows = np.flatnonzero(n_parts == m)
        pos = task_ptr[rows][:, None] + np.arange(m)
        task_start[pos] = st
        task_len[pos] = ln
    return task_ptr, task_start, task_len


def build_partition_plan(buckets: DegreeBuckets, k_by_bucket=DEFAULT_K_BY_BUCKET,
                         dim: int = 64, width: int | None = None) -> PartitionPlan:
    """Per-row task list; ``width`` (default ``dim``) is the kept range to slice.

    A row in a bucket with divisor K gets ``ceil(32 / K)`` tasks, capped at
    ``width`` so that no slice is empty.
    """
    k1, k2, k3 = k_by_bucket
    if not k1 > k2 > k3 >= 1:
        raise BadK(f"need K1 > K2 > K3 >= 1, got {k_by_bucket}")
    if k1 > dim:
        raise BadK(f"K1={k1} exceeds dim={dim}")
    width = dim if width is None else width
    if width < 1:
        raise BadK("width must be >= 1")
    per_bucket = np.array([parts_for(k1), parts_for(k2), parts_for(k3)], dtype=np.int64)
    n_parts = np.minimum(per_bucket[buckets.tags], width)
    task_ptr, task_start, task_len = _slice_tasks(n_parts, width)
    cost = buckets.degrees.astype(np.float64) * width + 1.0
    return PartitionPlan(buckets.num_rows, int(width), tuple(k_by_bucket),
                         task_ptr, task_start, task_len, cost)


def uniform_plan(a, width: int) -> PartitionPlan:
    """One task per row covering the whole kept range."""
    n = a.num_rows
    return PartitionPlan(n, int(width), None, np.arange(n + 1, dtype=np.int64),
                         np.zeros(n, dtype=np.int64), np.full(n, width, dtype=np.int64),
                         a.degrees().astype(np.float64) * width + 1.0)


def default_k_by_bucket(dim: int) -> tuple | None:
    """(32, 16, 8) clipped to ``dim`` and kept strictly decreasing; None if dim < 3."""
    if dim < 3:
        return None
    k1 = min(DEFAULT_K_BY_BUCKET[0], dim)
    k2 = min(DEFAULT_K_BY_BUCKET[1], k1 - 1)
    k3 = min(DEFAULT_K_BY_BUCKET[2], k2 - 1)
    return (k1, k2, k3)


def plan_for(a, width: int, dim: int, thresholds=DEFAULT_THRESHOLDS,
             k_by_bucket=None) -> PartitionPlan:
    kb = k_by_bucket or default_k_by_bucket(dim)
    if kb is None:
        return uniform_plan(a, width)
    return build_partition_plan(bucket_rows(a, thresholds), kb, dim, width)
