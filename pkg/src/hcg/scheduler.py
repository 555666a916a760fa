"""K-value profiling and the concurrent three-subgraph message-passing pipeline."""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .drelu import drelu_backward, drelu_forward
from .errors import NoFeasibleK, ShapeMismatch
from .graph import EDGE_TYPES, ENDPOINTS, HeteroGraph
from .kernels import (
    dr_spmm_forward,
    estimate_workload,
    max_merge,
    max_merge_backward,
    shared_pool,
    sspmm,
)
from .partition import (  # noqa: F401  (re-exported)
    DEFAULT_K_BY_BUCKET,
    DEFAULT_THRESHOLDS,
    DegreeBuckets,
    PartitionPlan,
    WARP,
    bucket_rows,
    build_partition_plan,
    plan_for,
)

K_CANDIDATES = (2, 4, 8, 16, 32, 64)
SCHEMA_VERSION = 1
CSV_FIELDS = ["edge_type", "k", "rep", "phase", "nanos"]


def available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# -- K profiling ------------------------------------------------------------


@dataclass
class EdgeProfile:
    chosen_k: int
    runtimes: dict      # k -> median seconds of init + fwd + bwd
    fwd: dict           # k -> median seconds of the forward kernel alone
    bwd: dict
    selection: dict


@dataclass
class KProfile:
    edges: dict
    candidates: list
    reps: int
    workers: int
    samples: list = field(default_factory=list)  # CSV rows

    def chosen(self) -> dict:
        return {et: p.chosen_k for et, p in self.edges.items()}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "candidates": list(self.candidates),
            "reps": self.reps,
            "workers": self.workers,
            "edges": {
                et: {
                    "chosen_k": p.chosen_k,
                    "runtimes": {str(k): v for k, v in p.runtimes.items()},
                    "fwd": {str(k): v for k, v in p.fwd.items()},
                    "bwd": {str(k): v for k, v in p.bwd.items()},
                    "selection": p.selection,
                }
                for et, p in self.edges.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KProfile":
        edges = {}
        for et, p in d["edges"].items():
            unkey = lambda m: {int(k): float(v) for k, v in m.items()}  # noqa: E731
            edges[et] = EdgeProfile(int(p["chosen_k"]), unkey(p["runtimes"]), unkey(p["fwd"]),
                                    unkey(p["bwd"]), p["selection"])
        return cls(edges, list(d["candidates"]), int(d["reps"]), int(d["workers"]))

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_json(cls, path) -> "KProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            w.writeheader()
            w.writerows(self.samples)


def select_k(runtimes: dict) -> int:
    """Argmin of the runtime table; ties go to the smaller k."""
    return min(runtimes, key=lambda k: (runtimes[k], k))


def profile_k(g: HeteroGraph, candidates=K_CANDIDATES, reps: int = 5, workers: int = 1,
              thresholds=DEFAULT_THRESHOLDS, seed: int = 0) -> KProfile:
    """Time D-ReLU + forward + backward at every feasible k, per edge type."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    pool = shared_pool(workers) if workers > 1 else None
    rng = np.random.default_rng(seed)
    edges, samples = {}, []
    for et in EDGE_TYPES:
        src, _ = ENDPOINTS[et]
        a, a_t, x = g.adj[et], g.adj_t[et], g.features(src)
        dim = x.shape[1]
        feasible = sorted({int(k) for k in candidates if 1 <= k <= dim})
        if not feasible:
            raise NoFeasibleK(f"{et}: no candidate in {list(candidates)} fits dim {dim}")
        dy = rng.standard_normal((a.num_rows, dim))
        # untimed pass so JIT loading never lands in a measurement
        warm = drelu_forward(x, feasible[0])
        dr_spmm_forward(a, warm, workers=workers, pool=pool)

        totals, fwds, bwds = {}, {}, {}
        for k in feasible:
            t_tot, t_fwd, t_bwd = [], [], []
            for rep in range(reps):
                t0 = time.perf_counter_ns()
                cb = drelu_forward(x, k)
                pf = plan_for(a, k, dim, thresholds)
                pb = plan_for(a_t, k, dim, thresholds)
                t1 = time.perf_counter_ns()
                dr_spmm_forward(a, cb, pf, workers, pool)
                t2 = time.perf_counter_ns()
                sspmm(a_t, dy, cb, pb, workers, pool)
                t3 = time.perf_counter_ns()
                for phase, ns in (("init", t1 - t0), ("fwd", t2 - t1), ("bwd", t3 - t2)):
                    samples.append({"edge_type": et, "k": k, "rep": rep, "phase": phase, "nanos": ns})
                t_tot.append((t3 - t0) * 1e-9)
                t_fwd.append((t2 - t1) * 1e-9)
                t_bwd.append((t3 - t2) * 1e-9)
            totals[k] = statistics.median(t_tot)
            fwds[k] = statistics.median(t_fwd)
            bwds[k] = statistics.median(t_bwd)
        best = select_k(totals)
        edges[et] = EdgeProfile(best, totals, fwds, bwds, {
            "rule": "argmin median(init+fwd+bwd); ties -> smaller k",
            "min_runtime": totals[best],
        })
    return KProfile(edges, sorted({int(k) for k in candidates}), reps, workers, samples)


# -- pipeline ---------------------------------------------------------------


@dataclass
class PipelineInputs:
    """One layer's worth of message passing over all three edge types.

    ``weights``/``biases`` are optional per-edge dense transforms applied after
    aggregation; without them the cell-side merge needs d_cell == d_net.
    ``d_cell``/``d_net`` are the upstream gradients of the merged cell output
    and the net output.
    """

    k: dict
    d_cell: np.ndarray
    d_net: np.ndarray
    weights: dict | None = None
    biases: dict | None = None
    drelu_mode: str = "literal"


@dataclass
class PipelineOutputs:
    y_cell: np.ndarray
    y_net: np.ndarray
    mask: object
    aggregated: dict
    d_x_cell: np.ndarray
    d_x_net: np.ndarray
    d_weights: dict
    d_biases: dict


@dataclass
class PipelineReport:
    mode: str
    workers: int
    phases: dict            # edge type -> {"init", "fwd", "bwd"} seconds
    merge: float
    wall: float
    sequential_equivalent: float
    overlap_ratio: float
    workload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **self.__dict__}


class _Group:
    """State and phase timings of one edge type's share of the pipeline."""

    def __init__(self, g, et, inp, workers, pool, thresholds):
        self.g, self.et, self.inp = g, et, inp
        self.workers, self.pool, self.thresholds = workers, pool, thresholds
        self.times = {"init": 0.0, "fwd": 0.0, "bwd": 0.0}

    def init(self):
        t = time.perf_counter()
        src, _ = ENDPOINTS[self.et]
        x = self.g.features(src)
        k = self.inp.k[self.et]
        self.cb = drelu_forward(x, k, self.inp.drelu_mode)
        self.plan_f = plan_for(self.g.adj[self.et], k, x.shape[1], self.thresholds)
        self.plan_b = plan_for(self.g.adj_t[self.et], k, x.shape[1], self.thresholds)
        self.times["init"] += time.perf_counter() - t

    def forward(self):
        t = time.perf_counter()
        self.z = dr_spmm_forward(self.g.adj[self.et], self.cb, self.plan_f, self.workers, self.pool)
        w = None if self.inp.weights is None else self.inp.weights[self.et]
        self.u = self.z if w is None else self.z @ w
        if self.inp.biases is not None:
            self.u = self.u + self.inp.biases[self.et]
        self.times["fwd"] += time.perf_counter() - t

    def backward(self, du):
        t = time.perf_counter()
        w = None if self.inp.weights is None else self.inp.weights[self.et]
        self.dw = None if w is None else self.z.T @ du
        self.db = du.sum(axis=0)
        dz = du if w is None else du @ w.T
        kept = sspmm(self.g.adj_t[self.et], dz, self.cb, self.plan_b, self.workers, self.pool)
        self.dx = drelu_backward(self.cb, kept)
        self.times["bwd"] += time.perf_counter() - t

    def init_forward(self):
        self.init()
        self.forward()


def run_pipeline(g: HeteroGraph, inputs: PipelineInputs, mode: str = "parallel",
                 workers: int = 1, thresholds=DEFAULT_THRESHOLDS):
    """Forward + backward message passing for one layer over all edge types.

    ``sequential``: pins, pinned, near forward one after another, merge, then
    the three backward passes in the same order.  ``parallel``: one driver
    thread per edge type (at most ``workers``); pins runs start to finish on
    its own, near and pinned meet at the merge barrier and then run their
    backward passes concurrently.  Kernels share one pool of ``workers``
    threads.  Both modes return bit-identical numbers.
    """
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown mode {mode!r}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if inputs.weights is None and g.d_cell != g.d_net:
        raise ShapeMismatch("merge without weights needs d_cell == d_net")
    pool = shared_pool(workers) if workers > 1 else None
    groups = {et: _Group(g, et, inputs, workers, pool, thresholds) for et in EDGE_TYPES}
    pins, pinned, near = groups["pins"], groups["pinned"], groups["near"]
    merge_t = 0.0

    def merge():
        nonlocal merge_t
        t = time.perf_counter()
        y_cell, mask = max_merge(near.u, pinned.u)
        d_near, d_pinned = max_merge_backward(inputs.d_cell, mask)
        merge_t = time.perf_counter() - t
        return y_cell, mask, d_near, d_pinned

    start = time.perf_counter()
    if mode == "sequential":
        for et in EDGE_TYPES:
            groups[et].init_forward()
        y_cell, mask, d_near, d_pinned = merge()
        pins.backward(inputs.d_net)
        pinned.backward(d_pinned)
        near.backward(d_near)
    else:
        drivers = min(len(EDGE_TYPES), workers)
        with ThreadPoolExecutor(drivers, thread_name_prefix="hcg-drv") as ex:
            f_pins = ex.submit(lambda: (pins.init_forward(), pins.backward(inputs.d_net)))
            f_pinned = ex.submit(pinned.init_forward)
            f_near = ex.submit(near.init_forward)
            f_pinned.result()
            f_near.result()
            y_cell, mask, d_near, d_pinned = merge()
            b_pinned = ex.submit(pinned.backward, d_pinned)
            b_near = ex.submit(near.backward, d_near)
            for f in (f_pins, b_pinned, b_near):
                f.result()
    wall = time.perf_counter() - start

    phases = {et: dict(grp.times) for et, grp in groups.items()}
    seq = sum(sum(p.values()) for p in phases.values()) + merge_t
    workload = {}
    for et, grp in groups.items():
        wl = estimate_workload(g.adj[et], grp.cb.k, WARP * workers)
        workload[et] = {"k": grp.cb.k, "max_row_workload": wl.max_row,
                        "mean_row_workload": wl.mean_row, "p_max": wl.p_max, "t_avail": wl.t_avail}
    report = PipelineReport(mode, workers, phases, merge_t, wall, seq,
                            max(0.0, 1.0 - wall / seq) if seq > 0 else 0.0, workload)
    outputs = PipelineOutputs(
        y_cell=y_cell,
        y_net=pins.u,
        mask=mask,
        aggregated={et: grp.z for et, grp in groups.items()},
        d_x_cell=near.dx + pins.dx,
        d_x_net=pinned.dx,
        d_weights={et: grp.dw for et, grp in groups.items()},
        d_biases={et: grp.db for et, grp in groups.items()},
    )
    return outputs, report
