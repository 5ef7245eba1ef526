"""Computation-edge scores: activation patching, EAP, EAP-IG, Weight, WeightGrad.

Every scorer returns a :class:`ScoreTable` over the edges of a
:class:`~minar.compgraph.ComputationGraph`.  Probe pairs are put in a
canonical (content-hash) order and processed in fixed-size chunks, so
permuting the probe list leaves every score bit-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backpropagate, evaluate_with_trace, linear_names
from .compgraph import ComputationGraph, build_computation_graph
from .gnn import Batch, ModelConfig, forward_batch, make_batch
from .graphs import ProbePair
from .training import bce_class_weights

METHODS = ("actpatch", "eap", "eapig", "weight", "weightgrad")


class ProbeError(ValueError):
    pass


@dataclass
class ScoreTable:
    method: str
    scores: np.ndarray
    signed: np.ndarray | None = None
    probe_id: str = ""
    pooling: str = "mean"
    loss: str = ""
    m: int | None = None
    meta: dict = field(default_factory=dict)

    def vector(self, gc: ComputationGraph | None = None) -> np.ndarray:
        return self.scores

    def __getitem__(self, k):
        return self.scores[k]

    def ranking(self, gc: ComputationGraph) -> np.ndarray:
        """Edge ids by descending score; ties by (src name, dst name) ascending."""
        return np.lexsort((gc.dst, gc.src, -self.scores))

    def header(self) -> dict:
        return {"method": self.method, "m": self.m, "pooling": self.pooling,
                "probe_id": self.probe_id, "loss": self.loss}

    def to_csv(self, path, gc: ComputationGraph) -> None:
        with open(path, "w") as fh:
            for k, v in self.header().items():
                fh.write(f"# {k}={'' if v is None else v}\n")
            fh.write("edge_src,edge_dst,param_name,row,col,score\n")
            for e in self.ranking(gc):
                s, d = gc.edge_name(e)
                pname, row, col = gc.edge_ref[e]
                fh.write(f"{s},{d},{pname},{row},{col},{float(self.scores[e])!r}\n")

    @classmethod
    def from_csv(cls, path, gc: ComputationGraph) -> "ScoreTable":
        head, scores = {}, np.zeros(gc.num_edges)
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    head[k] = v
                    continue
                if line.startswith("edge_src") or not line:
                    continue
                s, d, _, _, _, score = line.split(",")
                scores[gc.edge_id(s, d)] = float(score)
        m = head.get("m")
        return cls(method=head.get("method", ""), scores=scores, probe_id=head.get("probe_id", ""),
                   pooling=head.get("pooling", "mean"), loss=head.get("loss", ""),
                   m=int(m) if m else None)


# --------------------------------------------------------------------------
# probe handling and per-node losses
# --------------------------------------------------------------------------

def _graph_digest(h, g):
    for arr in (g.edges, g.weights, g.x):
        h.update(np.ascontiguousarray(arr).tobytes())


def probe_digest(pair: ProbePair) -> str:
    h = hashlib.blake2b(digest_size=16)
    _graph_digest(h, pair.clean)
    _graph_digest(h, pair.corrupted)
    return h.hexdigest()


def canonical_probes(probes) -> tuple[list[ProbePair], str]:
    probes = list(probes)
    if not probes:
        raise ProbeError("at least one probe pair is required")
    keyed = sorted(((probe_digest(p), i) for i, p in enumerate(probes)))
    ordered = [probes[i] for _, i in keyed]
    h = hashlib.blake2b(digest_size=8)
    for k, _ in keyed:
        h.update(k.encode())
    return ordered, h.hexdigest()


def default_loss(config: ModelConfig) -> str:
    return "mse" if config.heads == ("sp",) else "train"


def node_loss(ref, out, config: ModelConfig, loss: str, bce_scale: float = 25.0):
    """Per-node loss between reference and perturbed outputs and its gradient w.r.t. ``out``.

    ``mse``: squared error summed over heads.  ``train``: squared error on
    the SP head plus class-weighted BCE (targets = reference predictions
    thresholded at 0) on the BFS head, scaled like training.  ``diff``: the
    signed sum ``out - ref`` (linear; used for first-order checks).
    """
    per = np.zeros(out.shape[0])
    grad = np.zeros_like(out)
    if loss == "mse":
        r = out - ref
        return (r * r).sum(axis=1), 2.0 * r
    if loss == "diff":
        return (out - ref).sum(axis=1), np.ones_like(out)
    if loss != "train":
        raise ValueError(f"unknown loss {loss!r}")
    for c, head in enumerate(config.heads):
        if head == "sp":
            r = out[:, c] - ref[:, c]
            per += r * r
            grad[:, c] = 2.0 * r
        else:
            y = (ref[:, c] > 0).astype(float)
            w_neg, w_pos = bce_class_weights(y)
            w = bce_scale * np.where(y > 0.5, w_pos, w_neg)
            z = out[:, c]
            per += w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
            sig = 0.5 * (1.0 + np.tanh(0.5 * z))
            grad[:, c] = w * (sig - y)
    return per, grad


def _pool_weights(batch: Batch, pooling: str) -> np.ndarray:
    """Per-node weight turning a node sum into the pooled per-graph value."""
    if pooling == "sum":
        return np.ones(batch.num_nodes)
    if pooling == "mean":
        sizes = np.diff(batch.node_offsets)
        return 1.0 / sizes[batch.node_graph]
    raise ValueError(f"unknown pooling {pooling!r}")


def _probe_batches(probes, max_edges):
    for chunk in _chunk_pairs(probes, max_edges):
        clean = make_batch([p.clean for p in chunk])
        bad = make_batch([p.corrupted for p in chunk])
        yield chunk, clean, bad


def _chunk_pairs(probes, max_edges):
    chunk, total = [], 0
    for p in probes:
        if chunk and total + p.clean.num_edges > max_edges:
            yield chunk
            chunk, total = [], 0
        chunk.append(p)
        total += p.clean.num_edges
    if chunk:
        yield chunk


def _interpolated(clean: Batch, bad: Batch, alpha: float) -> Batch:
    b = Batch(**{k: getattr(bad, k) for k in bad.__dataclass_fields__})
    b.x = bad.x + alpha * (clean.x - bad.x)
    b.edge_attr = bad.edge_attr + alpha * (clean.edge_attr - bad.edge_attr)
    return b


def _edge_slots(gc: ComputationGraph):
    """param name -> (rows, cols, edge ids) for scattering weight-shaped arrays into edge order."""
    slots = {}
    for k, (pname, row, col) in enumerate(gc.edge_ref):
        slots.setdefault(pname, ([], [], []))
        r, c, e = slots[pname]
        r.append(row)
        c.append(col)
        e.append(k)
    return {p: (np.array(r), np.array(c), np.array(e)) for p, (r, c, e) in slots.items()}


def _to_edges(gc, mats: dict) -> np.ndarray:
    vec = np.zeros(gc.num_edges)
    for pname, (r, c, e) in _edge_slots(gc).items():
        vec[e] = mats[pname][r, c]
    return vec


# --------------------------------------------------------------------------
# scorers
# --------------------------------------------------------------------------

def weight_scores(params, gc: ComputationGraph) -> ScoreTable:
    signed = _to_edges(gc, params)
    return ScoreTable("weight", np.abs(signed), signed, probe_id="", loss="")


def _gradient_pass(params, config, clean_out, run: Batch, pool_w, loss, bce_scale):
    out, trace = evaluate_with_trace(params, config, run)
    per, grad = node_loss(clean_out, out, config, loss, bce_scale)
    return backpropagate(trace, params, grad * pool_w[:, None]), trace


def eap_scores(params, config: ModelConfig, probes, loss=None, pooling="mean", gc=None,
               max_edges=60000) -> ScoreTable:
    """Edge attribution patching: ``(z'_i - z_i) * W_ij * dL/dpre_j`` pooled over nodes."""
    return _attribution(params, config, probes, loss, pooling, gc, max_edges, steps=None)


def eap_ig_scores(params, config: ModelConfig, probes, m: int = 20, loss=None, pooling="mean",
                  gc=None, convention="right", max_edges=60000) -> ScoreTable:
    """EAP with the gradient averaged over ``m`` straight-line interpolation steps.

    ``convention="right"`` uses ``alpha = k/m`` for ``k = 1..m`` (the last
    step is the clean input); ``"left"`` uses ``k = 0..m-1``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if convention not in ("right", "left"):
        raise ValueError(f"unknown convention {convention!r}")
    ks = range(1, m + 1) if convention == "right" else range(m)
    alphas = [k / m for k in ks]
    table = _attribution(params, config, probes, loss, pooling, gc, max_edges, steps=alphas)
    table.method, table.m = "eapig", m
    table.meta["convention"] = convention
    return table


def _attribution(params, config, probes, loss, pooling, gc, max_edges, steps):
    loss = loss or default_loss(config)
    gc = gc or build_computation_graph(params, config)
    probes, pid = canonical_probes(probes)
    lins = linear_names(config)
    acc = {lin: np.zeros_like(params[lin + ".weight"]) for lin in lins}
    for chunk, clean, bad in _probe_batches(probes, max_edges):
        clean_out, ctrace = evaluate_with_trace(params, config, clean)
        pool_w = _pool_weights(clean, pooling)
        runs = [bad] if steps is None else [_interpolated(clean, bad, a) for a in steps]
        gsum = None
        for run in runs:
            rec, _ = _gradient_pass(params, config, clean_out, run, pool_w, loss, 25.0)
            gsum = rec.pre if gsum is None else {k: gsum[k] + rec.pre[k] for k in gsum}
        _, btrace = evaluate_with_trace(params, config, bad)
        for lin in lins:
            dz = btrace.inputs[lin] - ctrace.inputs[lin]
            acc[lin] += (gsum[lin] / len(runs)).T @ dz
    mats = {lin + ".weight": params[lin + ".weight"] * acc[lin] / len(probes) for lin in lins}
    signed = _to_edges(gc, mats)
    return ScoreTable("eap", np.abs(signed), signed, probe_id=pid, pooling=pooling, loss=loss)


def weight_grad_scores(params, config: ModelConfig, probes, loss=None, pooling="mean", gc=None,
                       max_edges=60000) -> ScoreTable:
    """``|mean over probes of dL(clean, corrupted)/dW_ij|``."""
    loss = loss or default_loss(config)
    gc = gc or build_computation_graph(params, config)
    probes, pid = canonical_probes(probes)
    acc = {k: np.zeros_like(v) for k, v in params.items() if k.endswith(".weight")}
    for chunk, clean, bad in _probe_batches(probes, max_edges):
        clean_out = forward_batch(params, config, clean)
        rec, _ = _gradient_pass(params, config, clean_out, bad, _pool_weights(clean, pooling), loss, 25.0)
        for k in acc:
            acc[k] += rec.params[k]
    signed = _to_edges(gc, {k: v / len(probes) for k, v in acc.items()})
    return ScoreTable("weightgrad", np.abs(signed), signed, probe_id=pid, pooling=pooling, loss=loss)


def act_patch_scores(params, config: ModelConfig, probes, loss=None, pooling="mean", gc=None,
                     edges=None, max_edges=60000) -> ScoreTable:
    """Zero one weight at a time and measure the pooled loss against the intact model.

    One forward pass per edge per probe chunk; ``edges`` restricts the set
    of edges scored (others get 0).
    """
    loss = loss or default_loss(config)
    gc = gc or build_computation_graph(params, config)
    probes, pid = canonical_probes(probes)
    batches = [make_batch([p.clean for p in chunk]) for chunk in _chunk_pairs(probes, max_edges)]
    refs = [forward_batch(params, config, b) for b in batches]
    pools = [_pool_weights(b, pooling) for b in batches]
    signed = np.zeros(gc.num_edges)
    for k in (range(gc.num_edges) if edges is None else edges):
        pname, row, col = gc.edge_ref[k]
        if params[pname][row, col] == 0.0:
            continue
        patched = dict(params)
        patched[pname] = params[pname].copy()
        patched[pname][row, col] = 0.0
        total = 0.0
        for b, ref, pw in zip(batches, refs, pools):
            per, _ = node_loss(ref, forward_batch(patched, config, b), config, loss)
            total += float(np.dot(per, pw))
        signed[k] = total / len(probes)
    return ScoreTable("actpatch", np.abs(signed), signed, probe_id=pid, pooling=pooling, loss=loss)


def score(method: str, params, config: ModelConfig, probes=None, *, m=20, loss=None,
          pooling="mean", gc=None, **kw) -> ScoreTable:
    gc = gc or build_computation_graph(params, config)
    if method == "weight":
        return weight_scores(params, gc)
    if method == "weightgrad":
        return weight_grad_scores(params, config, probes, loss, pooling, gc, **kw)
    if method == "eap":
        return eap_scores(params, config, probes, loss, pooling, gc, **kw)
    if method == "eapig":
        return eap_ig_scores(params, config, probes, m, loss, pooling, gc, **kw)
    if method == "actpatch":
        return act_patch_scores(params, config, probes, loss, pooling, gc, **kw)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
