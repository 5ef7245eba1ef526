"""Circuit construction, application, fidelity metrics, overlap and description."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .compgraph import ComputationGraph, PathOracle, name_key, score_vector
from .gnn import ModelConfig

log = logging.getLogger(__name__)

MODES = ("circuit-only", "ablate")


class CircuitConsistencyError(ValueError):
    pass


class InfeasibleEdgeWarning(UserWarning):
    pass


@dataclass
class Circuit:
    """An edge subset of a computation graph.

    ``edges`` holds ``(src, dst, param, row, col)`` tuples in computation
    graph edge order; ``weights`` caches the weight values at extraction.
    """

    edges: list
    weights: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.edges)

    @property
    def vertices(self) -> list[str]:
        vs = {e[0] for e in self.edges} | {e[1] for e in self.edges}
        return sorted(vs, key=name_key)

    @property
    def refs(self) -> set:
        return {(p, r, c) for _, _, p, r, c in self.edges}

    def edge_ids(self, gc: ComputationGraph) -> list[int]:
        return [gc.edge_id(s, d) for s, d, *_ in self.edges]

    def to_dict(self) -> dict:
        return {
            "edges": [{"src": s, "dst": d, "param": p, "row": int(r), "col": int(c), "weight": float(w)}
                      for (s, d, p, r, c), w in zip(self.edges, self.weights)],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Circuit":
        edges = [(e["src"], e["dst"], e["param"], int(e["row"]), int(e["col"])) for e in d["edges"]]
        return cls(edges, [float(e.get("weight", float("nan"))) for e in d["edges"]],
                   dict(d.get("provenance", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Circuit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dot(self, gc: ComputationGraph) -> str:
        return dot_for_edges(gc, self.edge_ids(gc), edge_weights=self.weights)


def circuit_from_edge_ids(gc: ComputationGraph, edge_ids, params=None, provenance=None) -> Circuit:
    ids = sorted(set(int(k) for k in edge_ids))
    edges, weights = [], []
    for k in ids:
        s, d = gc.edge_name(k)
        p, r, c = gc.edge_ref[k]
        edges.append((s, d, p, int(r), int(c)))
        weights.append(float(params[p][r, c]) if params is not None and p is not None else float("nan"))
    return Circuit(edges, weights, dict(provenance or {}))


# --------------------------------------------------------------------------
# Algorithm 1
# --------------------------------------------------------------------------

def ranked_edges(gc: ComputationGraph, scores) -> np.ndarray:
    """Edge ids by descending score, ties by (src id, dst id) ascending."""
    vec = score_vector(gc, scores)
    return np.lexsort((gc.dst, gc.src, -vec))


def discover_edge_ids(gc: ComputationGraph, scores, K: int, oracle: PathOracle | None = None) -> list[int]:
    """Edge ids of the Algorithm-1 circuit (see :func:`discover_circuit`)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    vec = score_vector(gc, scores)
    oracle = oracle or PathOracle(gc, vec)
    chosen: set[int] = set()
    taken = 0
    for k in ranked_edges(gc, vec):
        if taken >= K or vec[k] <= 0:
            break
        k = int(k)
        if k not in chosen:
            if not oracle.feasible(k):
                warnings.warn(f"edge {gc.edge_name(k)} lies on no input-to-output path; skipped",
                              InfeasibleEdgeWarning, stacklevel=3)
                continue
            chosen.update(oracle.path_edges(k))
        taken += 1
    return sorted(chosen)


def discover_circuit(gc: ComputationGraph, scores, K: int, params=None) -> Circuit:
    """Walk edges by descending score; for each of the top ``K`` admissible
    edges not yet in the circuit, add the best-scoring input-to-output path
    through it.  Edges on no such path are skipped with a warning; zero
    scores count as exhausted.
    """
    ids = discover_edge_ids(gc, scores, K)
    prov = {"K": int(K)}
    if hasattr(scores, "method"):
        prov.update(method=scores.method, probe_id=scores.probe_id)
        if scores.m is not None:
            prov["m"] = scores.m
    return circuit_from_edge_ids(gc, ids, params, prov)


def circuits_for_ks(gc: ComputationGraph, scores, ks, params=None) -> dict:
    """Circuits for several K sharing one DP precomputation."""
    vec = score_vector(gc, scores)
    oracle = PathOracle(gc, vec)
    out = {}
    for K in ks:
        ids = discover_edge_ids(gc, vec, K, oracle)
        prov = {"K": int(K), "method": getattr(scores, "method", None)}
        out[K] = circuit_from_edge_ids(gc, ids, params, prov)
    return out


def check_circuit(gc: ComputationGraph, edge_ids) -> list[str]:
    """Structural problems of an edge subset (empty list when it is a valid circuit)."""
    ids = sorted(set(int(k) for k in edge_ids))
    if not ids:
        return ["empty circuit"]
    problems = []
    src, dst = gc.src[ids], gc.dst[ids]
    verts = set(src.tolist()) | set(dst.tolist())
    has_in, has_out = set(dst.tolist()), set(src.tolist())
    for v in sorted(verts):
        if v not in has_in and gc.kind[v] != 0:
            problems.append(f"{gc.vertices[v]} has no parent but is not an input")
        if v not in has_out and gc.kind[v] != 2:
            problems.append(f"{gc.vertices[v]} has no child but is not an output")
    # weak connectivity via union-find
    parent = {v: v for v in verts}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in zip(src.tolist(), dst.tolist()):
        parent[find(a)] = find(b)
    if len({find(v) for v in verts}) != 1:
        problems.append("circuit is not connected")
    return problems


# --------------------------------------------------------------------------
# application and metrics
# --------------------------------------------------------------------------

def apply_circuit(params, circuit: Circuit, mode: str = "circuit-only") -> dict:
    """Keep only (``circuit-only``) or remove (``ablate``) the circuit's weights; biases stay."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    masks = {k: np.zeros(v.shape, dtype=bool) for k, v in params.items() if k.endswith(".weight")}
    for s, d, p, r, c in circuit.edges:
        if p not in masks or not (0 <= r < masks[p].shape[0] and 0 <= c < masks[p].shape[1]):
            raise CircuitConsistencyError(f"edge {s} -> {d} references missing weight {p}[{r}, {c}]")
        masks[p][r, c] = True
    out = {}
    for k, v in params.items():
        if k in masks:
            keep = masks[k] if mode == "circuit-only" else ~masks[k]
            out[k] = np.where(keep, v, 0.0)
        else:
            out[k] = v.copy()
    return out


def characterization(fid_plus: float, fid_minus: float) -> float:
    """Harmonic mean of Fid+ and 1 - Fid-; 0 when either is 0."""
    if fid_plus <= 0 or fid_minus >= 1:
        return 0.0
    return 1.0 / (1.0 / (2.0 * fid_plus) + 1.0 / (2.0 * (1.0 - fid_minus)))


def agree(a, b, kind: str, rtol: float = 0.05):
    """Per-node agreement: equal sign of logits for ``classification``,
    ``|a - b| <= rtol * max(|a|, 1e-6)`` for ``regression`` (``a`` is the reference)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if kind == "classification":
        return (a > 0) == (b > 0)
    if kind == "regression":
        return np.abs(a - b) <= rtol * np.maximum(np.abs(a), 1e-6)
    raise ValueError(f"unknown agreement kind {kind!r}")


HEAD_KIND = {"sp": "regression", "bfs": "classification"}


@dataclass
class FidelityReport:
    fid_plus: float
    fid_minus: float
    char: float
    rule: dict
    dataset_id: str = ""
    per_task: dict = field(default_factory=dict)

    def to_dict(self):
        return {"fid_plus": self.fid_plus, "fid_minus": self.fid_minus, "char": self.char,
                "rule": self.rule, "dataset_id": self.dataset_id, "per_task": self.per_task}


def fidelity_report(params, config: ModelConfig, circuit: Circuit, dataset, rtol: float = 0.05,
                    dataset_id: str = "", max_edges: int = 60000, outputs=None) -> FidelityReport:
    """Fid+/Fid- as one minus the mean (over graphs) node-agreement rate.

    Overall values average the per-head values.  ``outputs`` may supply
    precomputed ``(full, circuit-only, ablated)`` node outputs over ``dataset``.
    """
    from .training import model_outputs

    if outputs is None:
        outputs = (model_outputs(params, config, dataset, max_edges),
                   model_outputs(apply_circuit(params, circuit, "circuit-only"), config, dataset, max_edges),
                   model_outputs(apply_circuit(params, circuit, "ablate"), config, dataset, max_edges))
    full, keep, drop = outputs
    offsets = np.concatenate([[0], np.cumsum([g.n for g in dataset])])
    per_task = {}
    for c, head in enumerate(config.heads):
        kind = HEAD_KIND.get(head, "regression")

        def graph_mean(other):
            ok = agree(full[:, c], other[:, c], kind, rtol).astype(float)
            return float(np.mean([ok[offsets[i]:offsets[i + 1]].mean() for i in range(len(dataset))]))

        fp, fm = 1.0 - graph_mean(drop), 1.0 - graph_mean(keep)
        per_task[head] = {"fid_plus": fp, "fid_minus": fm, "char": characterization(fp, fm), "rule": kind}
    fp = float(np.mean([v["fid_plus"] for v in per_task.values()]))
    fm = float(np.mean([v["fid_minus"] for v in per_task.values()]))
    rule = {h: HEAD_KIND.get(h, "regression") for h in config.heads}
    rule["rtol"] = rtol
    return FidelityReport(fp, fm, characterization(fp, fm), rule, dataset_id, per_task)


def weighted_jaccard(a: Circuit, b: Circuit, params) -> float:
    """Sum of |w| over shared edges divided by the sum over the union."""
    ra, rb = a.refs, b.refs
    union = ra | rb
    if not union:
        return 0.0

    def mass(refs):
        # fsum is order-independent, so identical sets give exactly equal masses
        return math.fsum(abs(float(params[p][r, c])) for p, r, c in refs)

    den = mass(union)
    if den == 0.0:
        return float(ra == rb)
    return mass(ra & rb) / den


# --------------------------------------------------------------------------
# description
# --------------------------------------------------------------------------

def _bias(params, neuron: str) -> float:
    lin, j = neuron.rsplit(".", 1)
    b = params.get(lin + ".bias")
    return float(b[int(j)]) if b is not None else 0.0


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _affine(terms, bias, wrap=None) -> str:
    parts = []
    for name, w in terms:
        sym = f"relu({name})" if wrap and wrap(name) else name
        parts.append(f"{_fmt(w)} * {sym}")
    parts.append(_fmt(bias))
    return " + ".join(parts).replace("+ -", "- ")


@dataclass
class CircuitDescription:
    heads: dict                 # head label -> {"neuron", "terms": [(src, w)], "bias"}
    neurons: dict               # neuron -> {"in": [(src, w)], "out": [(dst, w)], "bias"}
    min_patterns: list          # (output neuron, pass-through neuron, difference neuron, a, b)
    text: str

    def __str__(self):
        return self.text


def _is_relu(name: str) -> bool:
    return name.rsplit(".", 2)[-2] == "0" and ".lins." in name


def describe_circuit(params, circuit: Circuit, config: ModelConfig | None = None) -> CircuitDescription:
    """Affine expression of every output head in its circuit in-neighbours,
    per-neuron fan-in/fan-out, and detected ``a - relu(a - b)`` min patterns."""
    fan_in, fan_out = defaultdict(list), defaultdict(list)
    for (s, d, p, r, c), _ in zip(circuit.edges, circuit.weights or [None] * len(circuit.edges)):
        w = float(params[p][r, c]) if p is not None else float("nan")
        fan_in[d].append((s, w))
        fan_out[s].append((d, w))
    for v in fan_in:
        fan_in[v].sort(key=lambda t: name_key(t[0]))
    for v in fan_out:
        fan_out[v].sort(key=lambda t: name_key(t[0]))

    heads = {}
    if config is not None:
        last = f"convs.{config.depth - 1}.up_mlp.lins.1"
        outputs = {f"{last}.{k}": h for k, h in enumerate(config.heads)}
    else:
        outputs = {v: v for v in fan_in if v not in fan_out}
    for neuron, label in outputs.items():
        if neuron in fan_in:
            heads[label] = {"neuron": neuron, "terms": fan_in[neuron], "bias": _bias(params, neuron)}

    neurons = {v: {"in": fan_in.get(v, []), "out": fan_out.get(v, []),
                   "bias": _bias(params, v) if ".lins." in v else 0.0}
               for v in circuit.vertices}

    patterns = _min_patterns(fan_in)
    lines = []
    for label, h in heads.items():
        lines.append(f"output_{label} = {_affine(h['terms'], h['bias'], _is_relu)}")
    for o, pos, neg, a, b in patterns:
        lines.append(f"min pattern at {o}: {a} - relu({a} - {b}) via {pos} and {neg}")
    for v, info in neurons.items():
        ins = ", ".join(f"{s} ({_fmt(w)})" for s, w in info["in"]) or "-"
        outs = ", ".join(f"{d} ({_fmt(w)})" for d, w in info["out"]) or "-"
        lines.append(f"{v}: bias {_fmt(info['bias'])}; in: {ins}; out: {outs}")
    return CircuitDescription(heads, neurons, patterns, "\n".join(lines))


def _min_patterns(fan_in, rtol=1e-6):
    """Find ``o = c*relu(a) - c*relu(a - b)`` (= c*min(a, b) for a >= 0)."""
    found = []
    for o, terms in fan_in.items():
        relu_terms = [(s, w) for s, w in terms if _is_relu(s)]
        for pos, wp in relu_terms:
            if wp <= 0 or len(fan_in.get(pos, [])) != 1:
                continue
            a, wa = fan_in[pos][0]
            for neg, wn in relu_terms:
                if neg == pos or wn >= 0 or abs(wn + wp) > rtol * abs(wp):
                    continue
                ins = dict(fan_in.get(neg, []))
                if len(ins) != 2 or a not in ins:
                    continue
                (b, wb), = [(k, w) for k, w in ins.items() if k != a]
                if abs(ins[a] - wa) <= rtol * abs(wa) and abs(wb + wa) <= rtol * abs(wa):
                    found.append((o, pos, neg, a, b))
    return found


# --------------------------------------------------------------------------
# DOT export
# --------------------------------------------------------------------------

def _vertex_class(gc, v):
    name = gc.vertices[v]
    if gc.kind[v] != 1:
        return "io"
    return "agg" if ".agg_mlp." in name else "up"


_FILL = {"io": "white", "agg": "lightblue", "up": "orange"}


def dot_for_edges(gc: ComputationGraph, edge_ids, edge_weights=None, highlight=None) -> str:
    """DOT text: inputs/outputs white, aggregation neurons blue, update neurons
    orange; edges red (positive) / blue (negative) with width by magnitude."""
    ids = [int(k) for k in edge_ids]
    weights = list(edge_weights) if edge_weights is not None else [float("nan")] * len(ids)
    highlight = set(highlight or [])
    finite = [abs(w) for w in weights if np.isfinite(w)]
    top = max(finite) if finite else 1.0
    verts = sorted({int(gc.src[k]) for k in ids} | {int(gc.dst[k]) for k in ids})
    lines = ["digraph circuit {", "  rankdir=LR;", "  node [shape=circle, style=filled];"]
    for v in verts:
        label = gc.head_names.get(gc.vertices[v], gc.vertices[v])
        lines.append(f'  "{gc.vertices[v]}" [label="{label}", fillcolor={_FILL[_vertex_class(gc, v)]}];')
    for k, w in zip(ids, weights):
        s, d = gc.edge_name(k)
        if np.isfinite(w):
            color = "red" if w >= 0 else "blue"
            width = 0.5 + 3.0 * abs(w) / top if top > 0 else 1.0
            attrs = f'color={color}, penwidth={width:.2f}, label="{w:.3g}"'
        else:
            attrs = "color=gray"
        if k in highlight:
            attrs += ", style=bold"
        lines.append(f'  "{s}" -> "{d}" [{attrs}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# circuits over training
# --------------------------------------------------------------------------

def smallest_sufficient_circuit(params, config, gc, scores, ks, testset, tolerance=1.25,
                                full_lmult=None, max_edges=60000):
    """Smallest circuit over the K schedule with circuit-only L_Mult <= tolerance x full L_Mult.

    Returns ``(circuit, circuit_lmult, sufficient)``; if no K qualifies, the
    largest-K circuit is returned with ``sufficient=False``.
    """
    from .training import evaluate

    if full_lmult is None:
        full_lmult = evaluate(params, config, testset, max_edges)["lmult"]
    circuits = circuits_for_ks(gc, scores, sorted(ks), params)
    last = None
    seen = {}
    for K in sorted(ks):
        circ = circuits[K]
        key = tuple(circ.refs)
        if key not in seen:
            seen[key] = evaluate(apply_circuit(params, circ, "circuit-only"), config, testset, max_edges)["lmult"]
        lm = seen[key]
        last = (circ, lm)
        if lm <= tolerance * full_lmult:
            return circ, lm, True
    return last[0], last[1], False


def circuit_over_training(checkpoints, config: ModelConfig, scorer, ks, testset, tolerance=1.25,
                          final_circuit: Circuit | None = None, max_edges=60000) -> list[dict]:
    """Per-checkpoint circuit size and losses.

    ``checkpoints`` is a list of ``(epoch, params)``; ``scorer(params, gc)``
    returns a ScoreTable; ``ks`` is the K schedule searched for the smallest
    sufficient circuit.  Every row also evaluates the final checkpoint's
    circuit edge subset at that checkpoint's parameters.
    """
    from .compgraph import build_computation_graph
    from .training import evaluate

    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    rows = []
    results = []
    for epoch, params in checkpoints:
        gc = build_computation_graph(params, config)
        full = evaluate(params, config, testset, max_edges)["lmult"]
        circ, lm, ok = smallest_sufficient_circuit(params, config, gc, scorer(params, gc), ks, testset,
                                                   tolerance, full, max_edges)
        results.append((epoch, params, full, circ, lm, ok))
    final = final_circuit if final_circuit is not None else results[-1][3]
    for epoch, params, full, circ, lm, ok in results:
        fl = evaluate(apply_circuit(params, final, "circuit-only"), config, testset, max_edges)["lmult"]
        rows.append({"epoch": epoch, "lmult_full": full, "circuit_size": len(circ), "circuit_lmult": lm,
                     "sufficient": ok, "final_circuit_lmult": fl, "circuit": circ})
    return rows
