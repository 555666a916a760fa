"""Two-layer heterogeneous convolution network with a hand-written backward pass.

One layer, for inputs ``x_cell`` and ``x_net``::

    h_src   = drelu(x_src, k[edge])                 per edge type
    z[e]    = A[e] @ densify(h_src)                 sparse kernel
    u[e]    = z[e] @ W[e] + b[e]
    y_net   = u[pins]
    y_cell  = max(u[near], u[pinned])               near wins ties

The prediction is column 0 of the second layer's cell output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drelu import MODES, drelu_backward, drelu_forward
from .errors import BadK, CorruptSection, FormatVersionMismatch, ShapeMismatch, TapeMismatch
from .graph import EDGE_TYPES, ENDPOINTS, HeteroGraph
from .kernels import (
    LayerTape,
    dr_spmm_backward,
    dr_spmm_forward,
    max_merge,
    max_merge_backward,
)
from .metrics import MetricsReport, mean_metrics, metrics
from .partition import DEFAULT_THRESHOLDS, plan_for

CKPT_MAGIC = b"HCMD"
CKPT_VERSION = 1


@dataclass
class HeteroConvLayer:
    d_cell_in: int
    d_net_in: int
    d_out: int
    w: dict            # edge type -> (d_src_in, d_out)
    b: dict            # edge type -> (d_out,)
    k: dict            # edge type -> D-ReLU keep count for that edge's source
    mode: str = "literal"

    def in_dim(self, et: str) -> int:
        return self.d_cell_in if ENDPOINTS[et][0] == "cell" else self.d_net_in

    def check(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for et in EDGE_TYPES:
            if self.w[et].shape != (self.in_dim(et), self.d_out) or self.b[et].shape != (self.d_out,):
                raise ShapeMismatch(f"{et} parameters do not match layer dims")
            if not 1 <= self.k[et] <= self.in_dim(et):
                raise BadK(f"{et}: k={self.k[et]} outside [1, {self.in_dim(et)}]")


@dataclass
class LayerGrads:
    w: dict
    b: dict


def init_layer(d_cell_in: int, d_net_in: int, d_out: int, k: dict, rng,
               mode: str = "literal") -> HeteroConvLayer:
    """Glorot-uniform weights, zero biases; ``k`` is clipped to each input width."""
    w, b, kk = {}, {}, {}
    for et in EDGE_TYPES:
        d_in = d_cell_in if ENDPOINTS[et][0] == "cell" else d_net_in
        lim = np.sqrt(6.0 / (d_in + d_out))
        w[et] = rng.uniform(-lim, lim, size=(d_in, d_out))
        b[et] = np.zeros(d_out)
        kk[et] = int(min(k[et], d_in))
    layer = HeteroConvLayer(d_cell_in, d_net_in, d_out, w, b, kk, mode)
    layer.check()
    return layer


def layer_forward(layer: HeteroConvLayer, g: HeteroGraph, x_cell: np.ndarray, x_net: np.ndarray,
                  workers: int = 1, thresholds=DEFAULT_THRESHOLDS):
    if x_cell.shape != (g.n_cell, layer.d_cell_in) or x_net.shape != (g.n_net, layer.d_net_in):
        raise ShapeMismatch(
            f"inputs {x_cell.shape}/{x_net.shape} do not fit layer "
            f"({layer.d_cell_in}, {layer.d_net_in}) on graph ({g.n_cell}, {g.n_net})"
        )
    src_x = {"cell": x_cell, "net": x_net}
    sparse = {}  # (node type, k) -> CBSR, shared by edges with equal k
    cbsr, z, u = {}, {}, {}
    for et in EDGE_TYPES:
        src = ENDPOINTS[et][0]
        key = (src, layer.k[et])
        if key not in sparse:
            sparse[key] = drelu_forward(src_x[src], layer.k[et], layer.mode)
        cb = cbsr[et] = sparse[key]
        a = g.adj[et]
        z[et] = dr_spmm_forward(a, cb, plan_for(a, cb.k, cb.dim, thresholds), workers)
        u[et] = z[et] @ layer.w[et] + layer.b[et]
    y_cell, mask = max_merge(u["near"], u["pinned"])
    tape = LayerTape(cbsr, mask, adj=g.adj, adj_t=g.adj_t, aggregated=z)
    return y_cell, u["pins"], tape


def layer_backward(layer: HeteroConvLayer, tape: LayerTape, d_y_cell: np.ndarray,
                   d_y_net: np.ndarray, workers: int = 1, thresholds=DEFAULT_THRESHOLDS):
    """Returns (LayerGrads, d_x_cell, d_x_net)."""
    if tape.mask is None or set(tape.cbsr) != set(EDGE_TYPES):
        raise TapeMismatch("tape does not come from layer_forward")
    d_near, d_pinned = max_merge_backward(d_y_cell, tape.mask)
    du = {"pins": d_y_net, "pinned": d_pinned, "near": d_near}
    gw, gb, dx = {}, {}, {}
    for et in EDGE_TYPES:
        z = tape.aggregated[et]
        if du[et].shape != (z.shape[0], layer.d_out):
            raise ShapeMismatch(f"{et}: upstream gradient {du[et].shape}")
        gw[et] = z.T @ du[et]
        gb[et] = du[et].sum(axis=0)
        dz = du[et] @ layer.w[et].T
        cb = tape.cbsr[et]
        a_t = tape.adj_t[et]
        kept = dr_spmm_backward(a_t, dz, tape, et, plan_for(a_t, cb.k, cb.dim, thresholds), workers)
        dx[et] = drelu_backward(cb, kept)
    return LayerGrads(gw, gb), dx["near"] + dx["pins"], dx["pinned"]


# -- network ----------------------------------------------------------------


@dataclass
class HeteroNet:
    layers: list

    def parameters(self):
        """(name, array) pairs in a fixed order; arrays are updated in place."""
        for i, layer in enumerate(self.layers):
            for et in EDGE_TYPES:
                yield f"{i}.w.{et}", layer.w[et]
                yield f"{i}.b.{et}", layer.b[et]


def init_network(d_cell: int, d_net: int, k: dict, hidden: int = 64, out: int = 1,
                 seed: int = 0, mode: str = "literal", zero_head: bool = False) -> HeteroNet:
    """``zero_head`` starts the output layer at zero, so early predictions are flat."""
    rng = np.random.default_rng(seed)
    first = init_layer(d_cell, d_net, hidden, k, rng, mode)
    head = init_layer(hidden, hidden, out, k, rng, mode)
    if zero_head:
        for et in EDGE_TYPES:
            head.w[et][:] = 0.0
    return HeteroNet([first, head])


def network_forward(net: HeteroNet, g: HeteroGraph, x_cell=None, x_net=None, workers: int = 1):
    """Returns (prediction per cell, tapes)."""
    h_cell = g.x_cell if x_cell is None else x_cell
    h_net = g.x_net if x_net is None else x_net
    tapes = []
    for layer in net.layers:
        h_cell, h_net, tape = layer_forward(layer, g, h_cell, h_net, workers)
        tapes.append(tape)
    return h_cell[:, 0].copy(), tapes


def network_backward(net: HeteroNet, tapes, d_pred: np.ndarray, n_net: int, workers: int = 1):
    """Returns (per-layer LayerGrads, d_x_cell, d_x_net)."""
    last = net.layers[-1]
    d_cell = np.zeros((d_pred.shape[0], last.d_out))
    d_cell[:, 0] = d_pred
    d_net = np.zeros((n_net, last.d_out))
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i], d_cell, d_net = layer_backward(net.layers[i], tapes[i], d_cell, d_net, workers)
    return grads, d_cell, d_net


def flat_grads(grads) -> list[np.ndarray]:
    out = []
    for gr in grads:
        for et in EDGE_TYPES:
            out.append(gr.w[et])
            out.append(gr.b[et])
    return out


def mse_loss(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error over ``mask`` (all cells by default) and its gradient."""
    pred, labels = np.asarray(pred, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"{pred.shape} vs {labels.shape}")
    diff = pred - labels
    if mask is not None:
        diff = np.where(mask, diff, 0.0)
        n = int(np.count_nonzero(mask))
    else:
        n = diff.size
    return float(np.dot(diff, diff) / n), 2.0 * diff / n


# -- optimisation -----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.0002
    weight_decay: float = 0.00001
    epochs: int = 200
    optimizer: str = "adam"
    seed: int = 0
    hidden: int = 64
    k_cell: int = 8
    k_net: int = 8
    k_edges: dict | None = None  # per-edge override, e.g. from a K profile
    holdout_fraction: float = 0.0
    drelu_mode: str = "literal"
    zero_head: bool = True
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1:
            raise ValueError("lr must be >= 0 and epochs >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def edge_k(self) -> dict:
        k = {"pins": self.k_cell, "near": self.k_cell, "pinned": self.k_net}
        k.update(self.k_edges or {})
        return k


class Optimizer:
    """Adam or SGD, both with decoupled weight decay."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.betas
        for p, gr, m, v in zip(self.params, grads, self.m, self.v):
            p -= c.lr * c.weight_decay * p
            if c.optimizer == "sgd":
                p -= c.lr * gr
                continue
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class TrainResult:
    net: HeteroNet
    losses: list
    metrics: MetricsReport
    per_graph: list = field(default_factory=list)


def _holdout_masks(graphs, frac: float, seed: int):
    """Per-graph boolean masks of training cells (True = used in the loss)."""
    rng = np.random.default_rng(seed + 1)
    out = []
    for g in graphs:
        m = np.ones(g.n_cell, dtype=bool)
        if frac > 0:
            m[rng.permutation(g.n_cell)[: int(round(frac * g.n_cell))]] = False
        out.append(m)
    return out


def train(graphs, cfg: TrainConfig, net: HeteroNet | None = None, workers: int = 1) -> TrainResult:
    """Full-graph training; gradients are averaged over graphs, one step per epoch."""
    if isinstance(graphs, HeteroGraph):
        graphs = [graphs]
    if any(g.labels is None for g in graphs):
        raise ValueError("every training graph needs labels")
    g0 = graphs[0]
    if any((g.d_cell, g.d_net) != (g0.d_cell, g0.d_net) for g in graphs):
        raise ShapeMismatch("all training graphs need the same feature widths")
    if net is None:
        net = init_network(g0.d_cell, g0.d_net, cfg.edge_k(), cfg.hidden, 1, cfg.seed,
                           cfg.drelu_mode, cfg.zero_head)
    params = [p for _, p in net.parameters()]
    opt = Optimizer(params, cfg)
    masks = _holdout_masks(graphs, cfg.holdout_fraction, cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        total, acc = 0.0, None
        for g, m in zip(graphs, masks):
            pred, tapes = network_forward(net, g, workers=workers)
            loss, d_pred = mse_loss(pred, g.labels, m)
            grads, _, _ = network_backward(net, tapes, d_pred, g.n_net, workers)
            flat = flat_grads(grads)
            acc = flat if acc is None else [a + b for a, b in zip(acc, flat)]
            total += loss
        losses.append(total / len(graphs))
        opt.step([a / len(graphs) for a in acc])
    reports = []
    for g, m in zip(graphs, masks):
        pred, _ = network_forward(net, g, workers=workers)
        sel = ~m if cfg.holdout_fraction > 0 else m
        reports.append(metrics(pred[sel], g.labels[sel]))
    return TrainResult(net, losses, mean_metrics(reports), reports)


# -- checkpoints ------------------------------------------------------------
#
# "HCMD", u32 version, u64 n_layers, then per layer: u64 d_cell_in, d_net_in,
# d_out, k_pins, k_pinned, k_near, mode (0 literal, 1 nonneg), followed by
# row-major f64 w and b for pins, pinned, near.


def save_checkpoint(net: HeteroNet, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<7Q", layer.d_cell_in, layer.d_net_in, layer.d_out,
                                 *(layer.k[et] for et in EDGE_TYPES), MODES.index(layer.mode)))
        for et in EDGE_TYPES:
            parts.append(np.ascontiguousarray(layer.w[et], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.b[et], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> HeteroNet:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatVersionMismatch(f"{path}: not an HCMD checkpoint")
    try:
        version, n_layers = struct.unpack_from("<IQ", buf, 4)
        if version != CKPT_VERSION:
            raise FormatVersionMismatch(f"{path}: version {version}, expected {CKPT_VERSION}")
        pos = 16
        layers = []
        for _ in range(n_layers):
            dc, dn, do, kp, kd, kn, mode = struct.unpack_from("<7Q", buf, pos)
            pos += 56
            w, b = {}, {}
            for et in EDGE_TYPES:
                d_in = dc if ENDPOINTS[et][0] == "cell" else dn
                n = d_in * do
                if pos + 8 * (n + do) > len(buf):
                    raise CorruptSection("truncated checkpoint")
                w[et] = np.frombuffer(buf, "<f8", n, pos).reshape(d_in, do).copy()
                pos += 8 * n
                b[et] = np.frombuffer(buf, "<f8", do, pos).copy()
                pos += 8 * do
            layers.append(HeteroConvLayer(dc, dn, do, w, b,
                                          {"pins": kp, "pinned": kd, "near": kn}, MODES[mode]))
    except struct.error as e:
        raise CorruptSection(f"truncated checkpoint: {e}") from None
    if pos != len(buf):
        raise CorruptSection("trailing bytes in checkpoint")
    return HeteroNet(layers)
