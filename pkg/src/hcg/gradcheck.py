"""Central finite-difference checks for the full network."""

from __future__ import annotations

import numpy as np

from .graph import EDGE_TYPES, ENDPOINTS, HeteroGraph
from .model import HeteroNet, init_network, layer_forward, mse_loss, network_backward, network_forward


def random_network(d_cell: int, d_net: int, k: dict, hidden: int = 64, seed: int = 0) -> HeteroNet:
    """Network with random biases too, so cells without neighbours do not tie at the merge."""
    net = init_network(d_cell, d_net, k, hidden, 1, seed)
    rng = np.random.default_rng(seed + 7919)
    for name, p in net.parameters():
        if ".b." in name:
            p[:] = rng.uniform(-0.5, 0.5, p.shape)
    return net


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are exactly zero."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _loss(net, g, x_cell, x_net):
    pred, _ = network_forward(net, g, x_cell, x_net)
    return mse_loss(pred, g.labels)[0]


def analytic_gradients(net: HeteroNet, g: HeteroGraph) -> dict:
    """Gradients keyed by parameter name, plus ``x_cell`` and ``x_net``."""
    pred, tapes = network_forward(net, g)
    _, d_pred = mse_loss(pred, g.labels)
    grads, d_x_cell, d_x_net = network_backward(net, tapes, d_pred, g.n_net)
    out = {}
    for i, gr in enumerate(grads):
        for et in EDGE_TYPES:
            out[f"{i}.w.{et}"] = gr.w[et]
            out[f"{i}.b.{et}"] = gr.b[et]
    out["x_cell"], out["x_net"] = d_x_cell, d_x_net
    return out


def numeric_gradients(net: HeteroNet, g: HeteroGraph, h: float = 1e-6) -> dict:
    x_cell, x_net = g.x_cell.copy(), g.x_net.copy()
    targets = dict(net.parameters())
    targets["x_cell"], targets["x_net"] = x_cell, x_net
    out = {}
    for name, p in targets.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = _loss(net, g, x_cell, x_net)
            p[idx] = orig - h
            down = _loss(net, g, x_cell, x_net)
            p[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        out[name] = fd
    return out


def selection_margin(net: HeteroNet, g: HeteroGraph) -> float:
    """Smallest gap guarding any top-k choice or merge winner in a forward pass.

    Finite differences are only meaningful while every perturbation stays
    well inside this gap.
    """
    h = {"cell": g.x_cell, "net": g.x_net}
    margin = np.inf
    for layer in net.layers:
        for et in EDGE_TYPES:
            x = h[ENDPOINTS[et][0]]
            k = layer.k[et]
            if k < x.shape[1]:
                s = -np.sort(-x, axis=1)
                margin = min(margin, float(np.min(s[:, k - 1] - s[:, k])))
        y_cell, y_net, tape = layer_forward(layer, g, h["cell"], h["net"])
        u = {et: tape.aggregated[et] @ layer.w[et] + layer.b[et] for et in ("near", "pinned")}
        margin = min(margin, float(np.min(np.abs(u["near"] - u["pinned"]))))
        h = {"cell": y_cell, "net": y_net}
    return margin


def gradient_check(net: HeteroNet, g: HeteroGraph, h: float = 1e-6) -> dict:
    """Relative error per gradient array."""
    a = analytic_gradients(net, g)
    n = numeric_gradients(net, g, h)
    return {name: relative_error(a[name], n[name]) for name in a}
