"""Heterogeneous circuit graphs: CSR adjacencies, validation, synthesis, I/O.

A graph has two node types (``cell``, ``net``) and three edge types.  Every
adjacency is stored destination-major: row ``i`` lists the source nodes whose
messages flow into destination ``i``.

===========  ==========  ===========  =================
edge type    rows (dst)  cols (src)   shape
===========  ==========  ===========  =================
``pins``     net         cell         n_net x n_cell
``pinned``   cell        net          n_cell x n_net
``near``     cell        cell         n_cell x n_cell
===========  ==========  ===========  =================

``pinned`` is always the transpose of ``pins``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptSection,
    DuplicateEdge,
    FormatVersionMismatch,
    InfeasibleSpec,
    OutOfRange,
)

EDGE_TYPES = ("pins", "pinned", "near")

# edge type -> (source node type, destination node type)
ENDPOINTS = {
    "pins": ("cell", "net"),
    "pinned": ("net", "cell"),
    "near": ("cell", "cell"),
}

MAGIC = b"HCGR"
FORMAT_VERSION = 1

# Design scales (nodes-net, nodes-cell, edges-pins, edges-near) of the
# graph-0 partition of each representative design.
PRESETS = {
    "small": {"design": "9282-zero", "n_net": 4628, "n_cell": 7767, "pins": 10013, "near": 338050},
    "medium": {"design": "2216-RISCY", "n_net": 5331, "n_cell": 9493, "pins": 12382, "near": 432187},
    "large": {"design": "7598-zero", "n_net": 5883, "n_cell": 9816, "pins": 16605, "near": 455383},
}


@dataclass(frozen=True, eq=False)
class CsrAdjacency:
    """Compressed sparse row matrix with int64 indices and float64 weights."""

    num_rows: int
    num_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        return np.repeat(np.arange(self.num_rows, dtype=np.int64), self.degrees())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_rows, self.num_cols))
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def problems(self) -> list[str]:
        """Structural defects; empty when the CSR invariants hold."""
        out = []
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.num_rows + 1,):
            return [f"row_ptr has length {rp.shape[0]}, expected {self.num_rows + 1}"]
        if rp[0] != 0:
            out.append("row_ptr[0] != 0")
        if rp[-1] != ci.shape[0]:
            out.append(f"row_ptr[-1]={rp[-1]} but nnz={ci.shape[0]}")
        if np.any(np.diff(rp) < 0):
            out.append("row_ptr decreases")
        if self.values.shape != ci.shape:
            out.append("values and col_idx lengths differ")
        if out:
            return out
        if ci.size and (ci.min() < 0 or ci.max() >= self.num_cols):
            out.append("col_idx out of range")
        if ci.size > 1:
            step = np.diff(ci)
            # positions where a new row starts are exempt from ordering
            new_row = np.zeros(ci.size - 1, dtype=bool)
            starts = rp[1:-1]
            starts = starts[(starts > 0) & (starts < ci.size)]
            new_row[starts - 1] = True
            if np.any((step <= 0) & ~new_row):
                out.append("col_idx not strictly increasing within a row")
        if not np.all(np.isfinite(self.values)):
            out.append("non-finite edge weight")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CsrAdjacency):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def from_coo(num_rows: int, num_cols: int, rows, cols, values=None) -> CsrAdjacency:
    """Vectorised CSR construction from coordinate arrays.

    Raises OutOfRange for coordinates outside the matrix and DuplicateEdge
    when a coordinate is listed twice.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if values is None:
        values = np.ones(rows.shape[0])
    values = np.asarray(values, dtype=np.float64).ravel()
    if not (rows.shape == cols.shape == values.shape):
        raise ValueError("rows, cols and values must have equal length")
    bad = (rows < 0) | (rows >= num_rows) | (cols < 0) | (cols >= num_cols)
    if np.any(bad):
        p = int(np.flatnonzero(bad)[0])
        raise OutOfRange(f"edge ({rows[p]}, {cols[p]}) outside {num_rows}x{num_cols}")
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    if rows.size > 1:
        dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
        if np.any(dup):
            p = int(np.flatnonzero(dup)[0])
            raise DuplicateEdge(f"duplicate edge ({rows[p]}, {cols[p]})")
    row_ptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_rows), out=row_ptr[1:])
    return CsrAdjacency(num_rows, num_cols, row_ptr, cols, values)


def build_csr(num_rows: int, num_cols: int, edges) -> CsrAdjacency:
    """Build a CSR matrix from ``(row, col, weight)`` triples."""
    edges = list(edges)
    if not edges:
        return from_coo(num_rows, num_cols, [], [], [])
    rows, cols, w = zip(*edges)
    return from_coo(num_rows, num_cols, rows, cols, w)


def transpose(a: CsrAdjacency) -> CsrAdjacency:
    # stable sort by column keeps rows ascending inside each transposed row
    order = np.argsort(a.col_idx, kind="stable")
    row_ptr = np.zeros(a.num_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(a.col_idx, minlength=a.num_cols), out=row_ptr[1:])
    return CsrAdjacency(
        a.num_cols, a.num_rows, row_ptr, a.row_ids()[order], a.values[order].copy()
    )


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Immutable two-node-type, three-edge-type circuit graph.

    Transposes of all adjacencies are computed once at construction and kept
    in ``adj_t``; the backward kernels read them on every pass.
    """

    n_cell: int
    n_net: int
    x_cell: np.ndarray
    x_net: np.ndarray
    adj: dict
    labels: np.ndarray | None = None
    adj_t: dict = field(init=False, repr=False)

    def __post_init__(self):
        # malformed adjacencies get no transpose; validate() reports them
        cached = {}
        for et in EDGE_TYPES:
            a = self.adj.get(et)
            cached[et] = None if a is None or a.problems() else transpose(a)
        object.__setattr__(self, "adj_t", cached)

    @property
    def d_cell(self) -> int:
        return int(self.x_cell.shape[1])

    @property
    def d_net(self) -> int:
        return int(self.x_net.shape[1])

    def features(self, node_type: str) -> np.ndarray:
        return self.x_cell if node_type == "cell" else self.x_net

    def dim(self, node_type: str) -> int:
        return self.features(node_type).shape[1]

    def count(self, node_type: str) -> int:
        return self.n_cell if node_type == "cell" else self.n_net

    def replace(self, **changes) -> "HeteroGraph":
        kw = dict(
            n_cell=self.n_cell,
            n_net=self.n_net,
            x_cell=self.x_cell,
            x_net=self.x_net,
            adj=dict(self.adj),
            labels=self.labels,
        )
        kw.update(changes)
        return HeteroGraph(**kw)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.n_cell == other.n_cell
            and self.n_net == other.n_net
            and np.array_equal(self.x_cell, other.x_cell)
            and np.array_equal(self.x_net, other.x_net)
            and all(self.adj[et] == other.adj[et] for et in EDGE_TYPES)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


def validate(g: HeteroGraph) -> list[Violation]:
    """Return every violated graph invariant; an empty list means valid."""
    found = []
    for name, x, n in (("x_cell", g.x_cell, g.n_cell), ("x_net", g.x_net, g.n_net)):
        if x.ndim != 2 or x.shape[0] != n:
            found.append(Violation("FeatureShape", f"{name} has shape {x.shape}, expected ({n}, d)"))
        elif not np.all(np.isfinite(x)):
            found.append(Violation("NonFiniteFeature", f"{name} contains NaN or inf"))
    for et in EDGE_TYPES:
        a = g.adj.get(et)
        if a is None:
            found.append(Violation("MissingAdjacency", et))
            continue
        src, dst = ENDPOINTS[et]
        want = (g.count(dst), g.count(src))
        if a.shape != want:
            found.append(Violation("AdjacencyShape", f"{et} is {a.shape}, expected {want}"))
        for p in a.problems():
            found.append(Violation("MalformedCsr", f"{et}: {p}"))
    pins_t = g.adj_t.get("pins")
    if pins_t is not None and "pinned" in g.adj and g.adj["pinned"] != pins_t:
        found.append(Violation("TransposeMismatch", "pinned is not the transpose of pins"))
    if g.labels is not None:
        if g.labels.shape != (g.n_cell,):
            found.append(Violation("LabelShape", f"labels have shape {g.labels.shape}"))
        elif not np.all(np.isfinite(g.labels)):
            found.append(Violation("NonFiniteLabel", "labels contain NaN or inf"))
    return found


# -- synthetic generation ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_cell: int
    n_net: int
    d_cell: int = 64
    d_net: int = 64
    near_mean_degree: float = 43.5
    pin_mean_degree: float = 2.16
    degree_skew: float = 0.5
    seed: int = 0


def preset_spec(name: str, scale: float = 1.0, d_cell: int = 64, d_net: int = 64,
                seed: int = 0, degree_skew: float = 0.5) -> SyntheticSpec:
    """Synthetic spec at the node counts and mean degrees of a named reference design.

    ``scale`` shrinks node counts while mean degrees are held fixed, so edge
    counts shrink by the same factor.
    """
    try:
        p = PRESETS[name]
    except KeyError:
        raise InfeasibleSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if scale <= 0:
        raise InfeasibleSpec("scale must be positive")
    return SyntheticSpec(
        n_cell=max(1, round(p["n_cell"] * scale)),
        n_net=max(1, round(p["n_net"] * scale)),
        d_cell=d_cell,
        d_net=d_net,
        near_mean_degree=p["near"] / p["n_cell"],
        pin_mean_degree=p["pins"] / p["n_net"],
        degree_skew=degree_skew,
        seed=seed,
    )


def _power_law_degrees(rng, n: int, mean: float, skew: float, hi: int) -> np.ndarray:
    """Truncated discrete power-law degrees in [1, hi] with the given mean.

    The tail exponent is ``2 + 1/skew`` so larger skew means a heavier tail.
    The scale is fitted by bisection on the drawn sample itself.
    """
    gamma = 2.0 + 1.0 / skew
    base = (1.0 - rng.random(n)) ** (-1.0 / (gamma - 1.0))

    def realised(xmin):
        return np.clip(np.floor(xmin * base), 1, hi)

    lo_s, hi_s = 1e-6, float(hi)
    for _ in range(80):
        mid = 0.5 * (lo_s + hi_s)
        if realised(mid).mean() < mean:
            lo_s = mid
        else:
            hi_s = mid
    return realised(hi_s).astype(np.int64)


def _sample_symmetric(rng, n: int, weights: np.ndarray, n_edges: int) -> np.ndarray:
    """``n_edges`` distinct undirected pairs, endpoints drawn with p ~ weights."""
    p = weights / weights.sum()
    keys = np.empty(0, dtype=np.int64)
    rounds = 0
    while keys.size < n_edges:
        need = n_edges - keys.size
        batch = int(need * 1.3) + 64
        if rounds < 40:
            u = rng.choice(n, size=batch, p=p)
            v = rng.choice(n, size=batch, p=p)
        else:
            # hub saturation: fall back to uniform endpoints
            u = rng.integers(n, size=batch)
            v = rng.integers(n, size=batch)
        rounds += 1
        keep = u != v
        lo, hi = np.minimum(u, v)[keep], np.maximum(u, v)[keep]
        cand = lo * n + hi
        _, first = np.unique(cand, return_index=True)
        cand = cand[np.sort(first)]
        cand = cand[~np.isin(cand, keys)]
        keys = np.concatenate([keys, cand[:need]])
    return keys


def _sample_rows(rng, n_rows: int, n_cols: int, degrees: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row distinct uniform columns; row r receives ``degrees[r]`` of them."""
    rows = np.repeat(np.arange(n_rows, dtype=np.int64), degrees)
    cols = rng.integers(n_cols, size=rows.size)
    while True:
        key = rows * n_cols + cols
        _, first = np.unique(key, return_index=True)
        dup = np.ones(key.size, dtype=bool)
        dup[first] = False
        if not dup.any():
            return rows, cols
        cols[dup] = rng.integers(n_cols, size=int(dup.sum()))


def generate_synthetic(spec: SyntheticSpec) -> HeteroGraph:
    """Random circuit graph with heavy-tailed ``near`` and sparse ``pins``.

    ``near`` is symmetric without self loops; ``pinned`` is the transpose of
    ``pins``.  Labels are the min-max normalised ``log1p`` of near degree plus
    N(0, 0.05) noise.  Deterministic in ``spec.seed``.
    """
    s = spec
    if min(s.n_cell, s.n_net, s.d_cell, s.d_net) < 1:
        raise InfeasibleSpec("node counts and feature dims must be >= 1")
    if s.degree_skew <= 0:
        raise InfeasibleSpec("degree_skew must be positive")
    if s.n_cell < 2 or not (1.0 <= s.near_mean_degree < s.n_cell - 1):
        raise InfeasibleSpec(
            f"near_mean_degree={s.near_mean_degree} infeasible for n_cell={s.n_cell}"
        )
    if s.n_cell < 2 or not (1.0 <= s.pin_mean_degree < s.n_cell - 1):
        raise InfeasibleSpec(
            f"pin_mean_degree={s.pin_mean_degree} infeasible for n_cell={s.n_cell}"
        )
    rng = np.random.default_rng(s.seed)

    near_w = _power_law_degrees(rng, s.n_cell, s.near_mean_degree, s.degree_skew, s.n_cell - 1)
    n_edges = round(s.n_cell * s.near_mean_degree / 2)
    keys = _sample_symmetric(rng, s.n_cell, near_w.astype(np.float64), n_edges)
    lo, hi = keys // s.n_cell, keys % s.n_cell
    near = from_coo(s.n_cell, s.n_cell, np.concatenate([lo, hi]), np.concatenate([hi, lo]))

    pin_deg = _power_law_degrees(rng, s.n_net, s.pin_mean_degree, s.degree_skew, s.n_cell - 1)
    rows, cols = _sample_rows(rng, s.n_net, s.n_cell, pin_deg)
    pins = from_coo(s.n_net, s.n_cell, rows, cols)

    x_cell = rng.standard_normal((s.n_cell, s.d_cell))
    x_net = rng.standard_normal((s.n_net, s.d_net))

    logd = np.log1p(near.degrees().astype(np.float64))
    span = logd.max() - logd.min()
    labels = (logd - logd.min()) / span if span > 0 else np.zeros_like(logd)
    labels = labels + rng.normal(0.0, 0.05, size=s.n_cell)

    return HeteroGraph(
        n_cell=s.n_cell,
        n_net=s.n_net,
        x_cell=x_cell,
        x_net=x_net,
        adj={"pins": pins, "pinned": transpose(pins), "near": near},
        labels=labels,
    )


def induced_subgraph(g: HeteroGraph, n_cell: int, n_net: int, d_cell: int | None = None,
                     d_net: int | None = None) -> HeteroGraph:
    """Restrict to the first ``n_cell`` cells / ``n_net`` nets (and leading feature dims)."""
    n_cell, n_net = min(n_cell, g.n_cell), min(n_net, g.n_net)
    counts = {"cell": n_cell, "net": n_net}
    adj = {}
    for et in EDGE_TYPES:
        a = g.adj[et]
        src, dst = ENDPOINTS[et]
        r, c = a.row_ids(), a.col_idx
        keep = (r < counts[dst]) & (c < counts[src])
        adj[et] = from_coo(counts[dst], counts[src], r[keep], c[keep], a.values[keep])
    return HeteroGraph(
        n_cell=n_cell,
        n_net=n_net,
        x_cell=np.ascontiguousarray(g.x_cell[:n_cell, :d_cell]),
        x_net=np.ascontiguousarray(g.x_net[:n_net, :d_net]),
        adj=adj,
        labels=None if g.labels is None else g.labels[:n_cell].copy(),
    )


# -- statistics -------------------------------------------------------------


@dataclass
class DegreeSummary:
    num_rows: int
    nnz: int
    min_degree: int
    max_degree: int
    mean_degree: float
    histogram: list  # [lo, hi, count] with lo <= degree < hi


@dataclass
class GraphStats:
    edges: dict
    nodes: dict

    def to_dict(self) -> dict:
        return {"schema_version": 1, "edges": {k: asdict(v) for k, v in self.edges.items()},
                "nodes": self.nodes}


def _histogram(deg: np.ndarray) -> list:
    top = int(deg.max()) if deg.size else 0
    edges = [0, 1]
    while edges[-1] <= top:
        edges.append(edges[-1] * 2)
    counts, _ = np.histogram(deg, bins=edges)
    return [[edges[i], edges[i + 1], int(counts[i])] for i in range(len(counts))]


def degree_summary(a: CsrAdjacency) -> DegreeSummary:
    deg = a.degrees()
    return DegreeSummary(
        num_rows=a.num_rows,
        nnz=a.nnz,
        min_degree=int(deg.min()) if deg.size else 0,
        max_degree=int(deg.max()) if deg.size else 0,
        mean_degree=float(deg.mean()) if deg.size else 0.0,
        histogram=_histogram(deg),
    )


def stats(g: HeteroGraph) -> GraphStats:
    return GraphStats(
        edges={et: degree_summary(g.adj[et]) for et in EDGE_TYPES},
        nodes={
            "cell": {"count": g.n_cell, "feature_dim": g.d_cell},
            "net": {"count": g.n_net, "feature_dim": g.d_net},
        },
    )


def write_stats(g: HeteroGraph, path) -> None:
    Path(path).write_text(json.dumps(stats(g).to_dict(), indent=2))


# -- binary format ----------------------------------------------------------
#
# little-endian: "HCGR", u32 version, u64 n_cell, u64 n_net, u64 d_cell,
# u64 d_net, f64 x_cell, f64 x_net, then for pins, pinned, near:
# u64 rows, u64 cols, u64 nnz, u64 row_ptr[rows+1], u64 col_idx[nnz],
# f64 values[nnz].  An optional trailing label section follows:
# u64 count (0 or n_cell), f64 labels[count].


def save(g: HeteroGraph, path) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<4Q", g.n_cell, g.n_net, g.d_cell, g.d_net),
             np.ascontiguousarray(g.x_cell, dtype="<f8").tobytes(),
             np.ascontiguousarray(g.x_net, dtype="<f8").tobytes()]
    for et in EDGE_TYPES:
        a = g.adj[et]
        parts.append(struct.pack("<3Q", a.num_rows, a.num_cols, a.nnz))
        parts.append(a.row_ptr.astype("<u8").tobytes())
        parts.append(a.col_idx.astype("<u8").tobytes())
        parts.append(a.values.astype("<f8").tobytes())
    labels = g.labels
    parts.append(struct.pack("<Q", 0 if labels is None else labels.shape[0]))
    if labels is not None:
        parts.append(labels.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptSection(f"truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64s(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<u8").astype(np.int64)

    def f64s(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def load(path) -> HeteroGraph:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if len(buf) < 8 or r.take(4, "magic") != MAGIC:
        raise FormatVersionMismatch(f"{path}: not an HCGR graph file")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    n_cell, n_net, d_cell, d_net = r.u64s(4, "header")
    if max(n_cell * d_cell, n_net * d_net) * 8 > r.remaining():
        raise CorruptSection("feature section larger than file")
    x_cell = r.f64s(n_cell * d_cell, "x_cell").reshape(n_cell, d_cell)
    x_net = r.f64s(n_net * d_net, "x_net").reshape(n_net, d_net)
    adj = {}
    for et in EDGE_TYPES:
        rows, cols, nnz = r.u64s(3, f"{et} header")
        if (rows + 1 + 2 * nnz) * 8 > r.remaining():
            raise CorruptSection(f"truncated while reading {et}")
        a = CsrAdjacency(int(rows), int(cols), r.u64s(rows + 1, f"{et} row_ptr"),
                         r.u64s(nnz, f"{et} col_idx"), r.f64s(nnz, f"{et} values"))
        bad = a.problems()
        if bad:
            raise CorruptSection(f"{et}: {bad[0]}")
        adj[et] = a
    labels = None
    if r.remaining():
        (count,) = r.u64s(1, "label count")
        if count:
            labels = r.f64s(count, "labels")
        if r.remaining():
            raise CorruptSection(f"{r.remaining()} trailing bytes")
    return HeteroGraph(int(n_cell), int(n_net), x_cell, x_net, adj, labels)


def mean_degree_targets(spec: SyntheticSpec) -> dict:
    """Expected nnz per edge type for a spec (pinned mirrors pins)."""
    pins = spec.n_net * spec.pin_mean_degree
    return {"pins": pins, "pinned": pins, "near": 2 * round(spec.n_cell * spec.near_mean_degree / 2)}

