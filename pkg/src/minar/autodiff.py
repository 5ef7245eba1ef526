"""Reverse-mode differentiation through MinAggGNN forward passes.

``evaluate_with_trace`` records every linear layer's input and
pre-activation; ``backpropagate`` walks the layers in reverse and returns
gradients for all parameters, all pre-activations, and the input features.
Min-aggregation routes each coordinate's gradient to the recorded winning
message only, and ReLU'(0) is taken as 0.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gnn import Batch, ModelConfig, check_params, forward_batch, make_batch


class TraceConsistencyError(ValueError):
    pass


def params_fingerprint(params: dict) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def linear_names(config: ModelConfig) -> list[str]:
    """Prefixes of every linear layer in forward order, e.g. ``convs.0.agg_mlp.lins.0``."""
    return [
        f"convs.{layer}.{block}.lins.{k}"
        for layer in range(config.depth)
        for block in ("agg_mlp", "up_mlp")
        for k in (0, 1)
    ]


@dataclass
class ActivationTrace:
    """Everything the forward pass computed.

    ``inputs[lin]`` is the matrix fed into linear layer ``lin`` and
    ``pre[lin]`` its output before any nonlinearity.  Rows are input-graph
    nodes for update MLPs and message edges (in batch order) for
    aggregation MLPs; ``item_node[lin]`` maps rows to the node they are
    attributed to (the message's destination).  ``argmin[layer]`` holds the
    winning message index per (node, message coordinate).
    """

    config: ModelConfig
    batch: Batch
    layers: list
    outputs: np.ndarray
    fingerprint: str
    inputs: dict = field(default_factory=dict)
    pre: dict = field(default_factory=dict)
    item_node: dict = field(default_factory=dict)

    def argmin(self, layer: int) -> np.ndarray:
        return self.layers[layer]["arg"]

    def argmin_neighbors(self, layer: int) -> np.ndarray:
        """Winning neighbour node id per (node, coordinate)."""
        return self.batch.src[self.layers[layer]["arg"]]

    def neuron_activation(self, name: str) -> np.ndarray:
        """Post-nonlinearity activation of one neuron, e.g. ``convs.1.up_mlp.lins.0.58``."""
        lin, j = name.rsplit(".", 1)
        j = int(j)
        pre = self.pre[lin][:, j]
        return np.maximum(pre, 0.0) if lin.endswith("lins.0") else pre


@dataclass
class GradientRecord:
    params: dict
    pre: dict
    x: np.ndarray
    edge_attr: np.ndarray

    def all_finite(self) -> bool:
        arrays = list(self.params.values()) + list(self.pre.values()) + [self.x, self.edge_attr]
        return all(np.all(np.isfinite(a)) for a in arrays)


def evaluate_with_trace(params, config: ModelConfig, graph) -> tuple[np.ndarray, ActivationTrace]:
    batch = graph if isinstance(graph, Batch) else make_batch(graph)
    check_params(params, config)
    layers = []
    out = forward_batch(params, config, batch, trace=layers)
    trace = ActivationTrace(config=config, batch=batch, layers=layers, outputs=out,
                            fingerprint=params_fingerprint(params))
    for layer, rec in enumerate(layers):
        p = f"convs.{layer}."
        trace.inputs[p + "agg_mlp.lins.0"] = rec["a_in"]
        trace.pre[p + "agg_mlp.lins.0"] = rec["a_pre"]
        trace.inputs[p + "agg_mlp.lins.1"] = rec["a_hid"]
        trace.pre[p + "agg_mlp.lins.1"] = rec["msg"]
        trace.inputs[p + "up_mlp.lins.0"] = rec["u_in"]
        trace.pre[p + "up_mlp.lins.0"] = rec["u_pre"]
        trace.inputs[p + "up_mlp.lins.1"] = rec["u_hid"]
        trace.pre[p + "up_mlp.lins.1"] = rec["out"]
        for k in (0, 1):
            trace.item_node[p + f"agg_mlp.lins.{k}"] = batch.dst
            trace.item_node[p + f"up_mlp.lins.{k}"] = None
    return out, trace


def backpropagate(trace: ActivationTrace, params, loss_seed: np.ndarray) -> GradientRecord:
    """Exact gradients given ``loss_seed = dL/d(outputs)`` (shape of ``trace.outputs``)."""
    if params_fingerprint(params) != trace.fingerprint:
        raise TraceConsistencyError("trace was recorded with different parameters")
    g = np.asarray(loss_seed, dtype=np.float64)
    if g.shape != trace.outputs.shape:
        raise TraceConsistencyError(f"loss seed shape {g.shape} != outputs {trace.outputs.shape}")
    batch = trace.batch
    n, e = batch.num_nodes, batch.num_edges
    grads, pre_grads = {}, {}
    g_edge = np.zeros_like(batch.edge_attr)
    for layer in reversed(range(trace.config.depth)):
        rec = trace.layers[layer]
        p = f"convs.{layer}."
        U0, U1 = params[p + "up_mlp.lins.0.weight"], params[p + "up_mlp.lins.1.weight"]
        W0, W1 = params[p + "agg_mlp.lins.0.weight"], params[p + "agg_mlp.lins.1.weight"]
        d_in = rec["u_in"].shape[1] - rec["agg"].shape[1]

        pre_grads[p + "up_mlp.lins.1"] = g
        grads[p + "up_mlp.lins.1.weight"] = g.T @ rec["u_hid"]
        grads[p + "up_mlp.lins.1.bias"] = g.sum(axis=0)
        g_upre = (g @ U1) * (rec["u_pre"] > 0)
        pre_grads[p + "up_mlp.lins.0"] = g_upre
        grads[p + "up_mlp.lins.0.weight"] = g_upre.T @ rec["u_in"]
        grads[p + "up_mlp.lins.0.bias"] = g_upre.sum(axis=0)
        g_uin = g_upre @ U0
        g_self, g_agg = g_uin[:, :d_in], g_uin[:, d_in:]

        # each (node, coordinate) routes to exactly one message row, so no collisions
        g_msg = np.zeros((e, g_agg.shape[1]))
        cols = np.broadcast_to(np.arange(g_agg.shape[1]), g_agg.shape)
        g_msg[rec["arg"], cols] = g_agg
        pre_grads[p + "agg_mlp.lins.1"] = g_msg
        grads[p + "agg_mlp.lins.1.weight"] = g_msg.T @ rec["a_hid"]
        grads[p + "agg_mlp.lins.1.bias"] = g_msg.sum(axis=0)
        g_apre = (g_msg @ W1) * (rec["a_pre"] > 0)
        pre_grads[p + "agg_mlp.lins.0"] = g_apre
        grads[p + "agg_mlp.lins.0.weight"] = g_apre.T @ rec["a_in"]
        grads[p + "agg_mlp.lins.0.bias"] = g_apre.sum(axis=0)
        g_ain = g_apre @ W0
        g_edge += g_ain[:, d_in:]
        g = g_self + _kernels.scatter_add(g_ain[:, :d_in], batch.src, n)
    return GradientRecord(params=grads, pre=pre_grads, x=g, edge_attr=g_edge)


def loss_and_grad(params, config, graph, loss_fn):
    """Convenience: ``loss_fn(outputs) -> (value, dL/doutputs)``; returns value, record."""
    out, trace = evaluate_with_trace(params, config, graph)
    value, seed = loss_fn(out)
    return value, backpropagate(trace, params, seed), trace


def finite_difference_gradient(params, config: ModelConfig, graph, loss, step: float = 1e-5,
                               names=None) -> GradientRecord:
    """Central differences of ``loss(outputs) -> float`` w.r.t. parameters and inputs.

    Input-feature and edge-weight gradients are reported in batch order (the
    same order ``backpropagate`` uses).  ``names`` limits which parameters
    are perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    batch = graph if isinstance(graph, Batch) else make_batch(graph)

    def f(p, b=batch):
        return float(loss(forward_batch(p, config, b)))

    grads = {}
    for name in (names if names is not None else sorted(params)):
        base = params[name]
        gr = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = dict(params)
            minus = dict(params)
            plus[name] = base.copy()
            minus[name] = base.copy()
            plus[name][idx] += step
            minus[name][idx] -= step
            gr[idx] = (f(plus) - f(minus)) / (2 * step)
        grads[name] = gr

    def perturbed(attr, idx, delta):
        b = Batch(**{k: getattr(batch, k) for k in batch.__dataclass_fields__})
        arr = getattr(batch, attr).copy()
        arr[idx] += delta
        setattr(b, attr, arr)
        return b

    gx = np.zeros_like(batch.x)
    for idx in np.ndindex(gx.shape):
        gx[idx] = (f(params, perturbed("x", idx, step)) - f(params, perturbed("x", idx, -step))) / (2 * step)
    ge = np.zeros_like(batch.edge_attr)
    for idx in np.ndindex(ge.shape):
        ge[idx] = (f(params, perturbed("edge_attr", idx, step))
                   - f(params, perturbed("edge_attr", idx, -step))) / (2 * step)
    return GradientRecord(params=grads, pre={}, x=gx, edge_attr=ge)
