"""Min-aggregated message-passing networks and the GINE layer.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed like a torch
state dict, e.g. ``convs.0.agg_mlp.lins.1.weight`` with shape
``(out, in)``.  Neuron ``j`` of that linear layer is named
``convs.0.agg_mlp.lins.1.j``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .graphs import AttributedGraph


class ModelConfigError(ValueError):
    pass


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a MinAggGNN.

    Each layer has ``f_agg: [h_u, e_uv] -> hidden -> message_dim`` and
    ``f_up: [h_v, m_v] -> hidden -> embed_dim``; the last layer's update MLP
    emits one value per head instead.  With the defaults the single-task
    model has 18240 scalar weights and the two-task model 18432.
    """

    depth: int = 2
    aggregation: str = "min"
    hidden: int = 64
    message_dim: int = 64
    embed_dim: int = 8
    in_dim: int = 1
    edge_dim: int = 1
    heads: tuple = ("sp",)
    self_loops: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ModelConfigError("depth must be >= 1")
        if min(self.hidden, self.message_dim, self.embed_dim, self.in_dim, self.edge_dim) < 1:
            raise ModelConfigError("all widths must be >= 1")
        if not self.heads:
            raise ModelConfigError("at least one output head is required")
        if self.aggregation not in ("min", "max"):
            raise ModelConfigError(f"unknown aggregation {self.aggregation!r}")
        object.__setattr__(self, "heads", tuple(self.heads))

    @classmethod
    def for_tasks(cls, tasks=("sp",), **kw) -> "ModelConfig":
        tasks = tuple(tasks)
        return cls(in_dim=len(tasks), heads=tasks, **kw)

    def layer_dims(self, layer: int) -> tuple[int, int]:
        """(input embedding width, output embedding width) of ``layer``."""
        d_in = self.in_dim if layer == 0 else self.embed_dim
        d_out = len(self.heads) if layer == self.depth - 1 else self.embed_dim
        return d_in, d_out

    def mlp_shapes(self, layer: int) -> dict[str, list[tuple[int, int]]]:
        d_in, d_out = self.layer_dims(layer)
        return {
            "agg_mlp": [(self.hidden, d_in + self.edge_dim), (self.message_dim, self.hidden)],
            "up_mlp": [(self.hidden, d_in + self.message_dim), (d_out, self.hidden)],
        }

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in range(self.depth):
            for block, lins in self.mlp_shapes(layer).items():
                for k, (o, i) in enumerate(lins):
                    prefix = f"convs.{layer}.{block}.lins.{k}"
                    shapes[prefix + ".weight"] = (o, i)
                    shapes[prefix + ".bias"] = (o,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases (torch Linear default)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
            bias = name[: -len("weight")] + "bias"
            params[bias] = rng.uniform(-bound, bound, size=shape[0])
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    shapes = config.param_shapes()
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ModelConfigError(f"parameter names mismatch (missing={missing[:3]}, extra={extra[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ModelConfigError(f"{name}: shape {params[name].shape} != {shape}")


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class Batch:
    """Disjoint union of graphs with message edges sorted by (dst, src)."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray
    ptr: np.ndarray
    node_graph: np.ndarray
    node_offsets: np.ndarray
    edge_perm: np.ndarray
    num_graphs: int
    graphs: list = field(default_factory=list, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.src)


def make_batch(graphs, *, x=None, edge_weights=None) -> Batch:
    """Concatenate graphs.  ``x`` / ``edge_weights`` override the stored features."""
    if isinstance(graphs, AttributedGraph):
        graphs = [graphs]
    graphs = list(graphs)
    if not graphs or any(g.n < 1 for g in graphs):
        raise ValueError("cannot evaluate an empty graph")
    sizes = np.array([g.n for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    src = np.concatenate([g.edges[:, 0] + offsets[i] for i, g in enumerate(graphs)])
    dst = np.concatenate([g.edges[:, 1] + offsets[i] for i, g in enumerate(graphs)])
    w = np.concatenate([g.weights for g in graphs]) if edge_weights is None else np.asarray(edge_weights, float)
    if x is None:
        x = np.concatenate([g.x for g in graphs])
    n = int(offsets[-1])
    perm = np.lexsort((src, dst))
    src, dst, w = src[perm], dst[perm], w[perm]
    counts = np.bincount(dst, minlength=n)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return Batch(
        x=np.asarray(x, dtype=np.float64),
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        edge_attr=w.reshape(-1, 1).astype(np.float64),
        ptr=ptr.astype(np.int64),
        node_graph=np.repeat(np.arange(len(graphs)), sizes),
        node_offsets=offsets,
        edge_perm=perm,
        num_graphs=len(graphs),
        graphs=graphs,
    )


def iter_chunks(graphs, max_edges=60000):
    """Split ``graphs`` into consecutive groups whose message-edge count stays bounded."""
    chunk, total = [], 0
    for g in graphs:
        if chunk and total + g.num_edges > max_edges:
            yield chunk
            chunk, total = [], 0
        chunk.append(g)
        total += g.num_edges
    if chunk:
        yield chunk


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def _relu(a):
    return np.maximum(a, 0.0)


def aggregate(messages, ptr, kind="min"):
    """Coordinatewise min (or max) over each node's incoming messages.

    Returns the aggregate and, per coordinate, the index of the winning
    message (first in (dst, src) order, i.e. smallest neighbour id on ties).
    """
    if messages.shape[0] == 0 or np.any(ptr[1:] == ptr[:-1]):
        raise EmptyNeighborhoodError(
            "a node has no incoming messages; add self-loops or drop isolated nodes"
        )
    if kind == "min":
        return _kernels.segment_min(messages, ptr)
    agg, arg = _kernels.segment_min(-messages, ptr)
    return -agg, arg


def minagg_layer_forward(params, layer, H, batch: Batch, aggregation="min", trace=None):
    """One MinAggGNN layer: ``f_up([h_v, min_u f_agg([h_u, e_uv])])``."""
    p = f"convs.{layer}."
    W0, b0 = params[p + "agg_mlp.lins.0.weight"], params[p + "agg_mlp.lins.0.bias"]
    W1, b1 = params[p + "agg_mlp.lins.1.weight"], params[p + "agg_mlp.lins.1.bias"]
    U0, c0 = params[p + "up_mlp.lins.0.weight"], params[p + "up_mlp.lins.0.bias"]
    U1, c1 = params[p + "up_mlp.lins.1.weight"], params[p + "up_mlp.lins.1.bias"]
    if H.shape[1] + batch.edge_attr.shape[1] != W0.shape[1]:
        raise ModelConfigError(
            f"layer {layer}: input width {H.shape[1]} does not match parameters"
        )

    a_in = np.concatenate([H[batch.src], batch.edge_attr], axis=1)
    a_pre = a_in @ W0.T + b0
    a_hid = _relu(a_pre)
    msg = a_hid @ W1.T + b1
    agg, arg = aggregate(msg, batch.ptr, aggregation)
    u_in = np.concatenate([H, agg], axis=1)
    u_pre = u_in @ U0.T + c0
    u_hid = _relu(u_pre)
    out = u_hid @ U1.T + c1
    if trace is not None:
        trace.append(dict(a_in=a_in, a_pre=a_pre, a_hid=a_hid, msg=msg, agg=agg, arg=arg,
                          u_in=u_in, u_pre=u_pre, u_hid=u_hid, out=out))
    return out


def forward_batch(params, config: ModelConfig, batch: Batch, trace=None) -> np.ndarray:
    if batch.x.shape[1] != config.in_dim:
        raise ModelConfigError(f"feature width {batch.x.shape[1]} != configured {config.in_dim}")
    if batch.edge_attr.shape[1] != config.edge_dim:
        raise ModelConfigError("edge feature width does not match configuration")
    H = batch.x
    for layer in range(config.depth):
        H = minagg_layer_forward(params, layer, H, batch, config.aggregation, trace)
    return H


def model_forward(params, config: ModelConfig, graph) -> np.ndarray:
    """Per-node head outputs (``num_nodes x len(heads)``) for a graph or list of graphs."""
    if isinstance(graph, Batch):
        return forward_batch(params, config, graph)
    if isinstance(graph, AttributedGraph):
        return forward_batch(params, config, make_batch([graph]))
    outs = [forward_batch(params, config, make_batch(c)) for c in iter_chunks(graph)]
    return np.concatenate(outs) if outs else np.zeros((0, len(config.heads)))


def split_by_graph(values, graphs):
    offsets = np.concatenate([[0], np.cumsum([g.n for g in graphs])])
    return [values[offsets[i]: offsets[i + 1]] for i in range(len(graphs))]


# --------------------------------------------------------------------------
# hand-built parameter fixtures
# --------------------------------------------------------------------------

def bellman_ford_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Exact Bellman-Ford parameters for a single-SP-task MinAggGNN with self-loops.

    Uses one neuron per MLP layer: ``f_agg([h_u, e]) = relu(h_u + e)``,
    ``f_up([h_v, m]) = relu(m)``; valid for nonnegative distances and weights.
    Ten nonzero weights for a depth-2 model.
    """
    params = {k: np.zeros(s) for k, s in config.param_shapes().items()}
    for layer in range(config.depth):
        p = f"convs.{layer}."
        d_in, _ = config.layer_dims(layer)
        params[p + "agg_mlp.lins.0.weight"][0, 0] = 1.0
        params[p + "agg_mlp.lins.0.weight"][0, d_in] = 1.0
        params[p + "agg_mlp.lins.1.weight"][0, 0] = 1.0
        params[p + "up_mlp.lins.0.weight"][0, d_in] = 1.0
        params[p + "up_mlp.lins.1.weight"][0, 0] = 1.0
    return params


def min_via_relu_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Bellman-Ford parameters whose update MLP computes ``min(a, b) = a - relu(a - b)``.

    ``a`` is the aggregated neighbour message and ``b`` the node's own value,
    so the network is exact even without self-loops.  Needs ``hidden >= 2``.
    """
    if config.hidden < 2:
        raise ModelConfigError("min-via-relu needs at least two hidden units")
    params = bellman_ford_params(config)
    for layer in range(config.depth):
        p = f"convs.{layer}."
        d_in, _ = config.layer_dims(layer)
        U0 = params[p + "up_mlp.lins.0.weight"]
        U0[0, d_in] = 1.0          # relu(a) = a, pass-through
        U0[1, d_in] = 1.0          # relu(a - b)
        U0[1, 0] = -1.0
        params[p + "up_mlp.lins.1.weight"][0, :2] = [1.0, -1.0]
    return params


# --------------------------------------------------------------------------
# GINE
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GINEConfig:
    dim: int = 8
    edge_dim: int = 1
    hidden: int = 16
    depth: int = 2

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in range(self.depth):
            p = f"convs.{layer}."
            shapes[p + "nn.lins.0.weight"] = (self.hidden, self.dim)
            shapes[p + "nn.lins.0.bias"] = (self.hidden,)
            shapes[p + "nn.lins.1.weight"] = (self.dim, self.hidden)
            shapes[p + "nn.lins.1.bias"] = (self.dim,)
            shapes[p + "lin_edge.weight"] = (self.dim, self.edge_dim)
        return shapes


def init_gine_params(config: GINEConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in config.param_shapes().items():
        fan_in = shape[1] if len(shape) == 2 else config.param_shapes()[name[:-4] + "weight"][1]
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    return out


def gine_layer_forward(params, layer, H, batch: Batch) -> np.ndarray:
    """``f(h_v + max_u relu(h_u + W_e e_uv))`` with a coordinatewise max."""
    p = f"convs.{layer}."
    We = params[p + "lin_edge.weight"]
    if We.shape != (H.shape[1], batch.edge_attr.shape[1]):
        raise ModelConfigError("edge projection must map edge features to the embedding width")
    msg = _relu(H[batch.src] + batch.edge_attr @ We.T)
    agg, _ = aggregate(msg, batch.ptr, "max")
    z = H + agg
    hid = _relu(z @ params[p + "nn.lins.0.weight"].T + params[p + "nn.lins.0.bias"])
    return hid @ params[p + "nn.lins.1.weight"].T + params[p + "nn.lins.1.bias"]


def gine_forward(params, config: GINEConfig, batch: Batch, H=None, steps: int = 1) -> np.ndarray:
    """Apply the GINE stack ``steps`` times recurrently (processor-style)."""
    H = batch.x if H is None else H
    for _ in range(steps):
        for layer in range(config.depth):
            H = gine_layer_forward(params, layer, H, batch)
    return H
