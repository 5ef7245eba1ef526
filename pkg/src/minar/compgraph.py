"""Neuron-level computation graph of a MinAggGNN and DAG path primitives."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gnn import ModelConfig


class CycleError(ValueError):
    pass


class PathInfeasibleError(ValueError):
    pass


_NUM = re.compile(r"(\d+)")


def name_key(name: str):
    """Natural sort key: ``convs.0.up_mlp.lins.0.2`` sorts before ``...lins.0.10``."""
    return tuple(int(t) if t.isdigit() else t for t in _NUM.split(name))


@dataclass
class ComputationGraph:
    """Vertices are neurons (plus input features and output heads); edges are scalar weights.

    Vertex ids follow natural name order, so "smallest id" and "smallest
    name" coincide.  ``edge_ref[k] = (param_name, row, col)`` locates edge
    ``k`` in the parameter dict.
    """

    vertices: list
    kind: np.ndarray            # 0 input, 1 hidden, 2 output
    src: np.ndarray
    dst: np.ndarray
    edge_ref: list
    bias_ref: dict = field(default_factory=dict)
    head_names: dict = field(default_factory=dict)
    _order: np.ndarray = None

    def __post_init__(self):
        self.index = {v: i for i, v in enumerate(self.vertices)}
        self.edge_index = {(int(s), int(d)): k for k, (s, d) in enumerate(zip(self.src, self.dst))}
        self._order = topological_order(self)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def order(self) -> np.ndarray:
        return self._order

    @property
    def inputs(self) -> np.ndarray:
        return np.flatnonzero(self.kind == 0)

    @property
    def outputs(self) -> np.ndarray:
        return np.flatnonzero(self.kind == 2)

    def edge_name(self, k: int) -> tuple[str, str]:
        return self.vertices[self.src[k]], self.vertices[self.dst[k]]

    def edge_id(self, src_name: str, dst_name: str) -> int:
        return self.edge_index[(self.index[src_name], self.index[dst_name])]

    def adjacency(self, direction: str = "in"):
        """CSR adjacency sorted by neighbour id: (ptr, neighbour, edge id)."""
        if direction == "in":
            key, other = self.dst, self.src
        else:
            key, other = self.src, self.dst
        perm = np.lexsort((other, key))
        counts = np.bincount(key, minlength=self.num_vertices)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return ptr, other[perm], perm

    def unreachable_vertices(self) -> list[str]:
        """Vertices with no path to any output (flagged, not an error)."""
        best, _ = _dp(self, np.zeros(self.num_edges), "out")
        return [self.vertices[i] for i in np.flatnonzero(~np.isfinite(best))]

    def to_dot(self, edge_weights=None, highlight=None) -> str:
        from .circuits import dot_for_edges
        return dot_for_edges(self, range(self.num_edges), edge_weights, highlight)


def build_computation_graph(params, config: ModelConfig) -> ComputationGraph:
    """One vertex per neuron/input/output and one edge per scalar weight.

    Inputs are ``x.{k}`` (node features) and ``edge_attr.{k}``.  The node
    embedding feeding layer ``l`` (inputs or the previous update MLP's
    output neurons) connects both to that layer's aggregation MLP (as the
    neighbour state) and to its update MLP (as the node's own state).
    """
    verts, kind = [], {}
    feat = [f"x.{k}" for k in range(config.in_dim)]
    eattr = [f"edge_attr.{k}" for k in range(config.edge_dim)]
    for v in feat + eattr:
        verts.append(v)
        kind[v] = 0
    src, dst, refs, bias_ref = [], [], [], {}
    state = feat
    for layer in range(config.depth):
        shapes = config.mlp_shapes(layer)
        agg_h = _neurons(f"convs.{layer}.agg_mlp.lins.0", shapes["agg_mlp"][0][0])
        agg_o = _neurons(f"convs.{layer}.agg_mlp.lins.1", shapes["agg_mlp"][1][0])
        up_h = _neurons(f"convs.{layer}.up_mlp.lins.0", shapes["up_mlp"][0][0])
        up_o = _neurons(f"convs.{layer}.up_mlp.lins.1", shapes["up_mlp"][1][0])
        last = layer == config.depth - 1
        for lin, ins, outs in (
            (f"convs.{layer}.agg_mlp.lins.0", state + eattr, agg_h),
            (f"convs.{layer}.agg_mlp.lins.1", agg_h, agg_o),
            (f"convs.{layer}.up_mlp.lins.0", state + agg_o, up_h),
            (f"convs.{layer}.up_mlp.lins.1", up_h, up_o),
        ):
            for j, o in enumerate(outs):
                verts.append(o)
                kind[o] = 2 if (last and lin.endswith("up_mlp.lins.1")) else 1
                bias_ref[o] = (lin + ".bias", j)
                for c, i in enumerate(ins):
                    src.append(i)
                    dst.append(o)
                    refs.append((lin + ".weight", j, c))
        state = up_o
    head_names = {state[k]: f"output_{h}" for k, h in enumerate(config.heads)}

    names = sorted(verts, key=name_key)
    idx = {v: i for i, v in enumerate(names)}
    s = np.array([idx[v] for v in src], dtype=np.int64)
    d = np.array([idx[v] for v in dst], dtype=np.int64)
    # canonical edge order: by (dst, src) vertex id
    perm = np.lexsort((s, d))
    return ComputationGraph(
        vertices=names,
        kind=np.array([kind[v] for v in names], dtype=np.int8),
        src=s[perm],
        dst=d[perm],
        edge_ref=[refs[k] for k in perm],
        bias_ref=bias_ref,
        head_names=head_names,
    )


def _neurons(prefix, n):
    return [f"{prefix}.{j}" for j in range(n)]


def topological_order(gc) -> np.ndarray:
    """Kahn's algorithm, smallest ready vertex first; raises on a cycle."""
    import heapq

    n = gc.num_vertices
    indeg = np.bincount(gc.dst, minlength=n)
    ptr, nbr, _ = gc.adjacency("out")
    ready = [int(v) for v in np.flatnonzero(indeg == 0)]
    heapq.heapify(ready)
    order = []
    indeg = indeg.copy()
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for u in nbr[ptr[v]: ptr[v + 1]]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, int(u))
    if len(order) != n:
        stuck = np.flatnonzero(indeg > 0)
        for k in range(gc.num_edges):
            if indeg[gc.src[k]] > 0 and indeg[gc.dst[k]] > 0:
                a, b = gc.vertices[gc.src[k]], gc.vertices[gc.dst[k]]
                raise CycleError(f"cycle through edge {a} -> {b}")
        raise CycleError(f"cycle among {len(stuck)} vertices")
    return np.array(order, dtype=np.int64)


def _dp(gc, scores, direction):
    """Best path score from inputs to each vertex ('in') or from each vertex to outputs ('out')."""
    ptr, nbr, eid = gc.adjacency(direction)
    order = gc.order if direction == "in" else gc.order[::-1]
    terminal = gc.kind == (0 if direction == "in" else 2)
    best, choice = _kernels.longest_path_dp(order, ptr, nbr, np.asarray(scores, float)[eid], terminal)
    # translate CSR slot -> edge id
    edge_choice = np.where(choice >= 0, eid[np.maximum(choice, 0)], -1)
    return best, edge_choice


@dataclass
class PathOracle:
    """Forward/backward DP tables for one score vector; answers path queries in O(path)."""

    gc: ComputationGraph
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.best_in, self.pred = _dp(self.gc, self.scores, "in")
        self.best_out, self.succ = _dp(self.gc, self.scores, "out")

    def feasible(self, k: int) -> bool:
        return bool(np.isfinite(self.best_in[self.gc.src[k]]) and np.isfinite(self.best_out[self.gc.dst[k]]))

    def path_score(self, k: int) -> float:
        return float(self.best_in[self.gc.src[k]] + self.scores[k] + self.best_out[self.gc.dst[k]])

    def path_edges(self, k: int) -> list[int]:
        gc = self.gc
        if not self.feasible(k):
            raise PathInfeasibleError(f"edge {gc.edge_name(k)} lies on no input-to-output path")
        head = []
        v = gc.src[k]
        while gc.kind[v] != 0:
            e = self.pred[v]
            head.append(int(e))
            v = gc.src[e]
        tail = []
        v = gc.dst[k]
        while gc.kind[v] != 2:
            e = self.succ[v]
            tail.append(int(e))
            v = gc.dst[e]
        return head[::-1] + [int(k)] + tail


def longest_path_through_edge(gc: ComputationGraph, scores, edge) -> list[int]:
    """Edge ids of the max-score input-to-output path containing ``edge``.

    ``scores`` is an array over edge ids or a mapping ``edge id -> score``
    (missing entries read as 0).  ``edge`` is an id or a (src, dst) name pair.
    """
    if isinstance(edge, tuple):
        edge = gc.edge_id(*edge)
    return PathOracle(gc, score_vector(gc, scores)).path_edges(int(edge))


def score_vector(gc, scores) -> np.ndarray:
    if isinstance(scores, dict):
        vec = np.zeros(gc.num_edges)
        for k, s in scores.items():
            vec[k] = s
        return vec
    if hasattr(scores, "vector"):
        return scores.vector(gc)
    return np.asarray(scores, dtype=np.float64)


def from_edge_list(vertices, edges, inputs, outputs) -> ComputationGraph:
    """Generic DAG fixture: ``edges`` are (src_name, dst_name) pairs."""
    names = sorted(vertices, key=name_key)
    idx = {v: i for i, v in enumerate(names)}
    s = np.array([idx[a] for a, _ in edges], dtype=np.int64)
    d = np.array([idx[b] for _, b in edges], dtype=np.int64)
    perm = np.lexsort((s, d)) if len(edges) else np.array([], dtype=np.int64)
    kind = np.array([0 if v in inputs else 2 if v in outputs else 1 for v in names], dtype=np.int8)
    return ComputationGraph(vertices=names, kind=kind, src=s[perm], dst=d[perm],
                            edge_ref=[(None, int(a), int(b)) for a, b in zip(s[perm], d[perm])])
