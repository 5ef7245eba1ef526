"""Attributed graphs, dataset generators, task encodings, corruption, and label oracles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

DEFAULT_B = 1000.0
TASKS = ("sp", "bfs")


class GraphInputError(ValueError):
    pass


@dataclass
class AttributedGraph:
    """A directed graph with node features, scalar edge weights, and labels.

    Undirected inputs are stored with both directions.  ``x`` has one row per
    node; ``labels`` holds ``dist`` (shortest-path state) and ``reach``
    (0/1 flags).  ``meta`` carries the generator family, seed, the
    Bellman-Ford step the shortest-path features were initialised at
    (``init_step``) and the number of steps the labels look ahead
    (``label_steps``).  Reachability is always counted from the source.
    """

    n: int
    edges: np.ndarray
    weights: np.ndarray
    x: np.ndarray
    source: int | None = 0
    labels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.labels = {k: np.asarray(v, dtype=np.float64) for k, v in self.labels.items()}
        if len(self.weights) != len(self.edges):
            raise GraphInputError("every edge needs exactly one weight")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise GraphInputError("edge endpoint out of range")
        if self.x.shape[0] != self.n:
            raise GraphInputError(f"feature rows {self.x.shape[0]} != node count {self.n}")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def has_self_loops(self) -> bool:
        return bool(np.any(self.edges[:, 0] == self.edges[:, 1]))

    def copy(self) -> "AttributedGraph":
        return replace(
            self,
            edges=self.edges.copy(),
            weights=self.weights.copy(),
            x=self.x.copy(),
            labels={k: v.copy() for k, v in self.labels.items()},
            meta=dict(self.meta),
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n": int(self.n),
            "edges": self.edges.tolist(),
            "weights": self.weights.tolist(),
            "x": self.x.tolist(),
            "source": None if self.source is None else int(self.source),
            "labels": {k: v.tolist() for k, v in self.labels.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributedGraph":
        x = d["x"]
        if not x:
            x = np.zeros((d["n"], 0))
        return cls(
            n=int(d["n"]),
            edges=np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
            weights=d["weights"],
            x=x,
            source=d.get("source"),
            labels=d.get("labels", {}),
            meta=d.get("meta", {}),
        )


@dataclass
class ProbePair:
    clean: AttributedGraph
    corrupted: AttributedGraph

    def __post_init__(self):
        if self.clean.n != self.corrupted.n or not np.array_equal(
            self.clean.edges, self.corrupted.edges
        ):
            raise GraphInputError("probe pair is not structurally aligned")


def write_jsonl(graphs: Iterable[AttributedGraph], path) -> None:
    # json emits shortest round-trip reprs, so floats keep full precision.
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_dict()) + "\n")


def read_jsonl(path) -> list[AttributedGraph]:
    with open(path) as fh:
        return [AttributedGraph.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# classical oracles
# --------------------------------------------------------------------------

def _initial_distances(n, source, B):
    d = np.full(n, float(B))
    d[source] = 0.0
    return d


def k_step_bellman_ford(graph: AttributedGraph, source: int, k: int, B: float = DEFAULT_B) -> np.ndarray:
    """Distances after ``k`` synchronous relaxation rounds from the 0/B initialisation.

    Every node keeps its own value as a candidate, as if it had a zero-weight
    self-loop.
    """
    if k < 0:
        raise GraphInputError("k must be nonnegative")
    d = _initial_distances(graph.n, source, B)
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    for _ in range(k):
        new = d.copy()
        np.minimum.at(new, dst, d[src] + graph.weights)
        d = new
    return d


def k_step_bfs(graph: AttributedGraph, source: int, k: int) -> np.ndarray:
    if k < 0:
        raise GraphInputError("k must be nonnegative")
    reach = np.zeros(graph.n, dtype=bool)
    reach[source] = True
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    for _ in range(k):
        new = reach.copy()
        new[dst[reach[src]]] = True
        if np.array_equal(new, reach):
            break
        reach = new
    return reach.astype(np.float64)


def hop_distances(graph: AttributedGraph, source: int) -> np.ndarray:
    """Unweighted hop count from ``source``; ``inf`` where unreachable."""
    hops = np.full(graph.n, np.inf)
    hops[source] = 0
    frontier = np.array([source])
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    level = 0
    while len(frontier):
        level += 1
        mask = np.isin(src, frontier)
        nxt = np.unique(dst[mask])
        nxt = nxt[~np.isfinite(hops[nxt])]
        hops[nxt] = level
        frontier = nxt
    return hops


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

def _undirected(pairs, weights):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    edges = np.concatenate([pairs, pairs[:, ::-1]])
    return edges, np.concatenate([weights, weights])


def add_self_loops(graph: AttributedGraph, weight: float = 0.0) -> AttributedGraph:
    g = graph.copy()
    keep = g.edges[:, 0] != g.edges[:, 1]
    loops = np.repeat(np.arange(g.n)[:, None], 2, axis=1)
    g.edges = np.concatenate([g.edges[keep], loops])
    g.weights = np.concatenate([g.weights[keep], np.full(g.n, weight)])
    return g


def remove_self_loops(graph: AttributedGraph) -> AttributedGraph:
    g = graph.copy()
    keep = g.edges[:, 0] != g.edges[:, 1]
    g.edges, g.weights = g.edges[keep], g.weights[keep]
    return g


def _finish(g: AttributedGraph, *, init_step, label_steps, B, tasks, self_loops):
    """Attach labels and encoded features; optionally add zero-weight self-loops."""
    if self_loops:
        g = add_self_loops(g)
    g.meta.update(init_step=int(init_step), label_steps=int(label_steps), B=float(B))
    g.labels = {
        "dist": k_step_bellman_ford(g, g.source, init_step + label_steps, B),
        # BFS always starts from the bare source flag, whatever step the
        # shortest-path features were initialised at
        "reach": k_step_bfs(g, g.source, label_steps),
    }
    return encode_task_features(g, tasks, B)


def path_graph(weights: Sequence[float], *, init_step=0, label_steps=2, B=DEFAULT_B,
               tasks=("sp",), self_loops=True, meta=None) -> AttributedGraph:
    """Path on ``len(weights) + 1`` nodes with the source at node 0."""
    n = len(weights) + 1
    pairs = [(i, i + 1) for i in range(n - 1)]
    edges, w = _undirected(pairs, weights)
    g = AttributedGraph(n=n, edges=edges, weights=w, x=np.zeros((n, 0)), source=0,
                        meta=dict(meta or {}, family="path"))
    return _finish(g, init_step=init_step, label_steps=label_steps, B=B, tasks=tasks,
                   self_loops=self_loops)


def h_gadget(K: int, *, label_steps=2, B=DEFAULT_B, tasks=("sp",), self_loops=True) -> AttributedGraph:
    """Best-effort reconstruction of the competing-routes training gadget.

    Nodes ``0..K`` form a unit-weight path from the source; a direct edge
    ``0 -> K`` of weight ``2K + 1`` competes with it, and node ``K + 1``
    hangs off ``K`` with weight 0.  Every node is reached within
    ``label_steps`` rounds when ``label_steps >= K``.
    """
    pairs = [(i, i + 1) for i in range(K)] + [(0, K), (K, K + 1)]
    weights = [1.0] * K + [2.0 * K + 1, 0.0]
    edges, w = _undirected(pairs, weights)
    g = AttributedGraph(n=K + 2, edges=edges, weights=w, x=np.zeros((K + 2, 0)), source=0,
                        meta={"family": "H", "K": K})
    return _finish(g, init_step=0, label_steps=label_steps, B=B, tasks=tasks,
                   self_loops=self_loops)


def generate_bellman_ford_trainset(K: int = 2, seed: int = 0, *, label_steps=2, B=DEFAULT_B,
                                   tasks=("sp",), self_loops=True) -> list[AttributedGraph]:
    """Curated path-graph training set.

    A path ``P_n^{(t)}(w_1, ..., w_n)`` has ``n`` edges with the listed weights
    and its features are the Bellman-Ford state after ``t`` rounds; labels
    look ``label_steps`` rounds further ahead.
    """
    if K < 1:
        raise GraphInputError("K must be at least 1")
    rng = np.random.default_rng(seed)
    kw = dict(label_steps=label_steps, B=B, tasks=tasks, self_loops=self_loops)
    out = []
    for a in range(2 * K + 1):
        for b in range(2 * K + 2):
            # weights a, 1, ..., 1, b, 0 with b on the K-th edge (K = 1 keeps a and b)
            w = [float(a)] + [1.0] * max(K - 2, 0) + [float(b), 0.0]
            out.append(path_graph(w, init_step=1, meta={"a": a, "b": b}, **kw))
    out.append(h_gadget(K, **kw))
    out.append(path_graph([1.0], init_step=0, meta={"special": "P1(1)"}, **kw))
    out.append(path_graph([1.0, 0.0], init_step=1, meta={"special": "P2(1,0)"}, **kw))
    hi = 2.0 * K + 1
    for i in range(4):
        out.append(path_graph(rng.uniform(0, hi, size=2).tolist(), init_step=0,
                              meta={"extra": i}, **kw))
    for i in range(4):
        out.append(path_graph(rng.uniform(0, hi, size=3).tolist(), init_step=2,
                              meta={"extra": 4 + i}, **kw))
    for i, g in enumerate(out):
        g.meta.update(split="train", index=i, seed=seed)
    return out


def _log_uniform_int(rng, lo, hi):
    return int(np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1)))))


def _tree_pairs(branching, depth):
    pairs, frontier, nxt = [], [0], 1
    for _ in range(depth):
        new = []
        for p in frontier:
            for _ in range(branching):
                pairs.append((p, nxt))
                new.append(nxt)
                nxt += 1
        frontier = new
    return pairs, nxt


def generate_ood_testset(seed: int = 0, count: int = 300, *, label_steps=2, B=DEFAULT_B,
                         tasks=("sp",), self_loops=True, max_nodes=200,
                         weight_range=(0.0, 5.0)) -> list[AttributedGraph]:
    """Out-of-distribution test graphs: cycles, complete graphs, G(n, 1/2), and trees.

    The family of graph ``i`` cycles through a fixed schedule (10% cycles,
    30% complete, 30% Erdos-Renyi, 30% trees); each graph draws from its own
    ``(seed, i)`` stream so the set is independent of generation order.
    """
    if count < 1:
        raise GraphInputError("count must be positive")
    schedule = ["cycle"] + ["complete"] * 3 + ["er"] * 3 + ["tree"] * 3
    kw = dict(init_step=0, label_steps=label_steps, B=B, tasks=tasks, self_loops=self_loops)
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        family = schedule[i % len(schedule)]
        if family == "cycle":
            n = 3 + i % 2
            pairs = [(j, (j + 1) % n) for j in range(n)]
            source = int(rng.integers(n))
        elif family == "complete":
            n = _log_uniform_int(rng, 5, max_nodes)
            pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
            source = int(rng.integers(n))
        elif family == "er":
            n = _log_uniform_int(rng, 5, max_nodes)
            iu, ju = np.triu_indices(n, 1)
            keep = rng.random(len(iu)) < 0.5
            pairs = np.stack([iu[keep], ju[keep]], axis=1)
            source = int(rng.integers(n))
        else:
            branching = 2 + (i // len(schedule)) % 2
            depth = 3 + (i // (2 * len(schedule))) % 2
            pairs, n = _tree_pairs(branching, depth)
            source = 0
            family = f"tree{branching}"
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        w = rng.uniform(*weight_range, size=len(pairs))
        edges, w = _undirected(pairs, w)
        g = AttributedGraph(n=n, edges=edges, weights=w, x=np.zeros((n, 0)), source=source,
                            meta={"family": family, "split": "test", "index": i, "seed": seed})
        out.append(_finish(g, **kw))
    return out


# --------------------------------------------------------------------------
# encodings and corruption
# --------------------------------------------------------------------------

def _check_tasks(tasks):
    tasks = tuple(tasks)
    if not tasks or any(t not in TASKS for t in tasks):
        raise GraphInputError(f"tasks must be a nonempty subset of {TASKS}, got {tasks}")
    return tuple(t for t in TASKS if t in tasks)


def encode_task_features(graph: AttributedGraph, tasks=("sp",), B: float = DEFAULT_B) -> AttributedGraph:
    """Set node features to the algorithm state at the graph's initial step.

    With ``init_step == 0`` (the default) this is ``x_sp = 0`` at the source
    and ``B`` elsewhere.  ``x_bfs`` is always the source flag (1 at the
    source, 0 elsewhere): only the shortest-path column follows
    ``init_step``.  Columns follow the order ``(sp, bfs)``.
    """
    if graph.source is None:
        raise GraphInputError("graph has no designated source")
    tasks = _check_tasks(tasks)
    t = int(graph.meta.get("init_step", 0))
    cols = []
    for task in tasks:
        if task == "sp":
            cols.append(k_step_bellman_ford(graph, graph.source, t, B))
        else:
            cols.append(k_step_bfs(graph, graph.source, 0))
    g = graph.copy()
    g.x = np.stack(cols, axis=1)
    g.meta["tasks"] = list(tasks)
    return g


def corrupt_instance(graph: AttributedGraph, tasks=("sp",), B: float = DEFAULT_B) -> ProbePair:
    """Zero every edge weight and flip the task features; structure is untouched.

    Shortest-path features map ``v -> B - v`` and reachability flags
    ``v -> 1 - v``, which sends the 0/B and 1/0 encodings to B/0 and 0/1.
    """
    tasks = _check_tasks(tasks)
    if graph.x.shape[1] != len(tasks):
        raise GraphInputError("feature width does not match the task set")
    bad = graph.copy()
    bad.weights = np.zeros_like(graph.weights)
    for c, task in enumerate(tasks):
        bad.x[:, c] = (B - graph.x[:, c]) if task == "sp" else (1.0 - graph.x[:, c])
    bad.meta["corrupted"] = not graph.meta.get("corrupted", False)
    return ProbePair(clean=graph, corrupted=bad)


def make_probes(graphs: Iterable[AttributedGraph], tasks=("sp",), B: float = DEFAULT_B) -> list[ProbePair]:
    return [corrupt_instance(g, tasks, B) for g in graphs]
