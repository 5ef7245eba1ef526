"""Full-batch AdamW training with L1 regularisation, task losses, and metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import backpropagate, evaluate_with_trace
from .gnn import ModelConfig, iter_chunks, make_batch, model_forward
from .graphs import hop_distances

log = logging.getLogger(__name__)

ZERO_PRED_PENALTY = 1e6


class TrainingDivergedError(RuntimeError):
    pass


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20000
    weight_decay: float = 0.01
    l1: float = 1e-3
    bce_class_weighting: bool = True
    bce_scale: float = 25.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # "node_mean": mean over all training nodes; "graph_sum": sum over graphs of per-graph node-mean MSE
    mse_reduction: str = "node_mean"
    checkpoint_every: int = 100
    dense_checkpoint_every: int = 25
    dense_until: int = 4000
    # test-set evaluation cadence for the log; 0 evaluates at every checkpoint
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.weight_decay < 0 or self.l1 < 0:
            raise ValueError("need lr > 0, epochs >= 1, weight_decay >= 0, l1 >= 0")
        if self.mse_reduction not in ("graph_sum", "node_mean"):
            raise ValueError(f"unknown mse_reduction {self.mse_reduction!r}")

    def is_checkpoint(self, epoch: int) -> bool:
        if epoch == self.epochs:
            return True
        every = self.dense_checkpoint_every if epoch < self.dense_until else self.checkpoint_every
        return every > 0 and epoch % every == 0


LOG_FIELDS = ("epoch", "mse_train", "lmult_test", "reach_acc", "l1", "circuit_lmult", "circuit_reach_acc")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("log epochs must increase")
        self.rows.append({k: row.get(k, float("nan")) for k in LOG_FIELDS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(v)) if k != "epoch" else int(v) for k, v in r.items()})

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                out.rows.append({k: (int(r[k]) if k == "epoch" else float(r[k])) for k in LOG_FIELDS})
        return out


# --------------------------------------------------------------------------
# losses and metrics
# --------------------------------------------------------------------------

def bce_class_weights(labels) -> tuple[float, float]:
    """(negative weight, positive weight) giving both classes equal total mass.

    If one class is absent both weights are 1.
    """
    labels = np.asarray(labels)
    n = labels.size
    pos = float(np.sum(labels > 0.5))
    neg = n - pos
    if pos == 0 or neg == 0:
        return 1.0, 1.0
    return n / (2.0 * neg), n / (2.0 * pos)


def weighted_bce_loss(logits, labels, scale: float = 1.0, weighted: bool = True):
    """Mean class-weighted binary cross-entropy times ``scale``; returns (loss, dL/dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w_neg, w_pos = bce_class_weights(y) if weighted else (1.0, 1.0)
    w = np.where(y > 0.5, w_pos, w_neg)
    # log(1 + exp(-|z|)) form is stable for large |z|
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    n = max(z.size, 1)
    return scale * float(np.sum(w * per)) / n, scale * w * (sig - y) / n


def _eligible(graph, L):
    cache = graph.__dict__.setdefault("_cache", {})
    if ("elig", L) not in cache:
        hops = hop_distances(graph, graph.source)
        cache[("elig", L)] = (hops <= L) & (graph.labels["dist"] > 0)
    return cache[("elig", L)]


def multiplicative_test_loss(predictions, testset, L: int = 2) -> float:
    """Mean over graphs of the summed ``|1 - y / yhat|`` over eligible nodes.

    ``predictions`` is either one array over all nodes (concatenated in
    ``testset`` order) or a list of per-graph arrays.  Near-zero predictions
    contribute a fixed penalty.
    """
    if not isinstance(predictions, (list, tuple)):
        predictions = np.asarray(predictions, dtype=float).reshape(-1)
        offsets = np.concatenate([[0], np.cumsum([g.n for g in testset])])
        predictions = [predictions[offsets[i]: offsets[i + 1]] for i in range(len(testset))]
    total, any_eligible = 0.0, False
    for g, pred in zip(testset, predictions):
        mask = _eligible(g, L)
        if not mask.any():
            continue
        any_eligible = True
        y = g.labels["dist"][mask]
        yhat = np.asarray(pred, dtype=float).reshape(-1)[mask]
        small = np.abs(yhat) < 1e-12
        terms = np.where(small, ZERO_PRED_PENALTY, np.abs(1.0 - y / np.where(small, 1.0, yhat)))
        total += float(np.sum(terms))
    if not any_eligible:
        raise EmptyEvaluationError("no eligible nodes in the evaluation set")
    return total / len(testset)


def reach_accuracy(logits, graphs) -> float:
    labels = np.concatenate([g.labels["reach"] for g in graphs])
    return float(np.mean((np.asarray(logits).reshape(-1) > 0) == (labels > 0.5)))


def model_outputs(params, config: ModelConfig, graphs, max_edges: int = 60000) -> np.ndarray:
    """Concatenated per-node outputs over ``graphs``, evaluated in edge-bounded chunks."""
    return np.concatenate([model_forward(params, config, make_batch(c))
                           for c in iter_chunks(graphs, max_edges)])


def metrics_from_outputs(out, config: ModelConfig, testset) -> dict:
    res = {"lmult": multiplicative_test_loss(out[:, config.heads.index("sp")], testset, config.depth)
           if "sp" in config.heads else float("nan")}
    res["reach_acc"] = (reach_accuracy(out[:, config.heads.index("bfs")], testset)
                        if "bfs" in config.heads else float("nan"))
    return res


def evaluate(params, config: ModelConfig, testset, max_edges: int = 60000) -> dict:
    """L_Mult on the SP head and reachability accuracy on the BFS head (if any)."""
    return metrics_from_outputs(model_outputs(params, config, testset, max_edges), config, testset)


def l1_norm(params) -> float:
    return float(sum(np.abs(v).sum() for v in params.values()))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class TrainingObjective:
    """MSE (+ weighted BCE) task loss on a fixed full batch."""

    def __init__(self, config: ModelConfig, tconfig: TrainConfig, trainset):
        self.config, self.tconfig = config, tconfig
        self.batch = make_batch(trainset)
        self.y_dist = np.concatenate([g.labels["dist"] for g in trainset])
        self.y_reach = np.concatenate([g.labels["reach"] for g in trainset])
        sizes = np.array([g.n for g in trainset], dtype=float)
        if tconfig.mse_reduction == "graph_sum":
            self.node_w = 1.0 / np.repeat(sizes, sizes.astype(int))
        else:
            self.node_w = np.full(int(sizes.sum()), 1.0 / sizes.sum())

    def __call__(self, params):
        out, trace = evaluate_with_trace(params, self.config, self.batch)
        seed = np.zeros_like(out)
        heads = self.config.heads
        loss, mse = 0.0, float("nan")
        if "sp" in heads:
            c = heads.index("sp")
            r = out[:, c] - self.y_dist
            mse = float(np.sum(self.node_w * r * r))
            loss += mse
            seed[:, c] = 2.0 * self.node_w * r
        if "bfs" in heads:
            c = heads.index("bfs")
            bce, g = weighted_bce_loss(out[:, c], self.y_reach, self.tconfig.bce_scale,
                                       self.tconfig.bce_class_weighting)
            loss += bce
            seed[:, c] = g
        return loss, mse, out, trace, seed


class AdamW:
    """Adam moments with decoupled weight decay (torch.optim.AdamW semantics)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            p, g = params[k], grads[k]
            p *= 1.0 - self.lr * self.wd
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            denom = np.sqrt(self.v[k]) / np.sqrt(c2) + self.eps
            p -= (self.lr / c1) * self.m[k] / denom


def train_model(init, config: ModelConfig, tconfig: TrainConfig, trainset, testset=None,
                reference_circuit=None, callback=None):
    """Train and return ``(params, checkpoints, log)``.

    ``checkpoints`` is a list of ``(epoch, params_copy)`` at the configured
    cadence (epoch 0 included).  When ``reference_circuit`` is given, the
    log also tracks that edge subset evaluated in circuit-only mode.
    """
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in init.items()}
    objective = TrainingObjective(config, tconfig, trainset)
    opt = AdamW(params, tconfig.lr, (tconfig.beta1, tconfig.beta2), tconfig.eps, tconfig.weight_decay)
    checkpoints, tlog = [], TrainLog()

    def record(epoch, mse):
        checkpoints.append((epoch, {k: v.copy() for k, v in params.items()}))
        row = {"epoch": epoch, "mse_train": mse, "l1": l1_norm(params)}
        due = tconfig.eval_every <= 0 or epoch % tconfig.eval_every == 0 or epoch == tconfig.epochs
        if testset is not None and due:
            ev = evaluate(params, config, testset)
            row.update(lmult_test=ev["lmult"], reach_acc=ev["reach_acc"])
            if reference_circuit is not None:
                from .circuits import apply_circuit
                cev = evaluate(apply_circuit(params, reference_circuit, "circuit-only"), config, testset)
                row.update(circuit_lmult=cev["lmult"], circuit_reach_acc=cev["reach_acc"])
        tlog.append(**row)
        if callback is not None:
            callback(epoch, params, row)

    for epoch in range(tconfig.epochs + 1):
        loss, mse, out, trace, seed = objective(params)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        if tconfig.is_checkpoint(epoch) or epoch == 0:
            record(epoch, mse)
        if epoch == tconfig.epochs:
            break
        grads = backpropagate(trace, params, seed).params
        if tconfig.l1 > 0:
            for k in grads:
                grads[k] = grads[k] + tconfig.l1 * np.sign(params[k])
        opt.step(params, grads)
    return params, checkpoints, tlog


def train_config_dict(tconfig: TrainConfig) -> dict:
    return asdict(tconfig)
