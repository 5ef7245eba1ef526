"""``minar`` command-line interface.

Every artifact is plain text: datasets are JSONL, checkpoints and circuits
JSON, scores and tables CSV, and graphs DOT.  Usage errors exit with status
2 (argparse); data errors print one ``minar: error: ...`` line and exit 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys

import numpy as np

DEFAULT_KS = "1..10"
LARGE_KS = "10,25,50,100,250,500,1000,1500,2000,2500,3000"

log = logging.getLogger("minar")


class DataError(Exception):
    """Raised for bad inputs; reported as a one-line diagnostic with exit status 1."""


def parse_ks(text: str) -> list[int]:
    """``"1..10"``, ``"1,2,5"``, ``"1,2,...,10"`` or a mix; result is sorted and unique."""
    text = text.replace(" ", "")
    text = re.sub(r"(\d+),\.\.\.,(\d+)", r"\1..\2", text)
    ks = set()
    for part in filter(None, text.split(",")):
        if ".." in part:
            lo, _, hi = part.partition("..")
            if not (lo.isdigit() and hi.isdigit()):
                raise argparse.ArgumentTypeError(f"bad K range {part!r}")
            ks.update(range(int(lo), int(hi) + 1))
        elif part.isdigit():
            ks.add(int(part))
        else:
            raise argparse.ArgumentTypeError(f"bad K value {part!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return sorted(ks)


def _tasks(text: str) -> tuple[str, ...]:
    tasks = tuple(t for t in text.split(",") if t)
    bad = [t for t in tasks if t not in ("sp", "bfs")]
    if bad or not tasks:
        raise argparse.ArgumentTypeError(f"tasks must be a comma list of sp,bfs (got {text!r})")
    return tasks


def _default_seed() -> int:
    env = os.environ.get("MINAR_SEED", "")
    try:
        return int(env) if env else 0
    except ValueError:
        return 0


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _need_file(path, what):
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _load_model(path):
    from .io import load_checkpoint
    return load_checkpoint(_need_file(path, "checkpoint"))


def _load_graphs(path, limit=None):
    from .graphs import read_jsonl
    graphs = read_jsonl(_need_file(path, "dataset"))
    if not graphs:
        raise DataError(f"dataset is empty: {path}")
    return graphs[:limit] if limit else graphs


def _ensure_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)


def _jsonable(obj):
    """NaN/inf become null so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _circuit_metrics(params, config, circuit, graphs, rtol, full_out=None):
    from .circuits import apply_circuit, fidelity_report
    from .training import metrics_from_outputs, model_outputs

    outs = (model_outputs(params, config, graphs) if full_out is None else full_out,
            model_outputs(apply_circuit(params, circuit, "circuit-only"), config, graphs),
            model_outputs(apply_circuit(params, circuit, "ablate"), config, graphs))
    full, keep, drop = (metrics_from_outputs(o, config, graphs) for o in outs)
    fid = fidelity_report(params, config, circuit, graphs, rtol=rtol, outputs=outs)
    return {
        "edges": len(circuit),
        "lmult_full": full["lmult"], "lmult_circuit": keep["lmult"], "lmult_ablated": drop["lmult"],
        "reach_acc_full": full["reach_acc"], "reach_acc_circuit": keep["reach_acc"],
        "reach_acc_ablated": drop["reach_acc"],
        "fid_plus": fid.fid_plus, "fid_minus": fid.fid_minus, "char": fid.char,
        "per_task": fid.per_task, "rule": fid.rule,
    }


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    from .graphs import generate_bellman_ford_trainset, generate_ood_testset, write_jsonl

    _ensure_dir(args.out)
    train = generate_bellman_ford_trainset(args.K, args.seed, label_steps=args.L, B=args.B, tasks=args.tasks)
    test = generate_ood_testset(args.seed, args.count, label_steps=args.L, B=args.B, tasks=args.tasks)
    write_jsonl(train, os.path.join(args.out, "train.jsonl"))
    write_jsonl(test, os.path.join(args.out, "test.jsonl"))
    print(f"wrote {len(train)} training and {len(test)} test graphs to {args.out}")


def cmd_train(args):
    from .gnn import ModelConfig, init_params
    from .io import checkpoint_path, save_checkpoint
    from .training import TrainConfig, train_config_dict, train_model

    train = _load_graphs(args.train)
    test = _load_graphs(args.test) if args.test else None
    config = ModelConfig.for_tasks(args.tasks, depth=args.L)
    tconfig = TrainConfig(lr=args.lr, epochs=args.epochs, weight_decay=args.weight_decay, l1=args.l1,
                          mse_reduction=args.mse_reduction, checkpoint_every=args.checkpoint_every,
                          dense_checkpoint_every=args.dense_checkpoint_every, dense_until=args.dense_until,
                          eval_every=args.eval_every, seed=args.seed)
    _ensure_dir(args.out)
    extra = {"train_config": train_config_dict(tconfig)}

    def on_checkpoint(epoch, params, row):
        save_checkpoint(checkpoint_path(args.out, epoch), params, config, epoch, args.seed, **extra)
        if epoch % 1000 == 0:
            log.info("epoch %d mse %.3g lmult %.4g", epoch, row["mse_train"], row.get("lmult_test", np.nan))

    _, _, tlog = train_model(init_params(config, args.seed), config, tconfig, train, test,
                             callback=on_checkpoint)
    tlog.to_csv(os.path.join(args.out, "train_log.csv"))
    last = tlog.rows[-1]
    print(f"trained {args.epochs} epochs; final mse {last['mse_train']:.4g}, "
          f"test lmult {last['lmult_test']:.4g}, reach acc {last['reach_acc']:.4g}")


def cmd_score(args):
    from .attribution import score
    from .compgraph import build_computation_graph
    from .graphs import make_probes

    params, config, _ = _load_model(args.checkpoint)
    gc = build_computation_graph(params, config)
    probes = None
    if args.method != "weight":
        if not args.probes:
            raise DataError(f"--probes is required for method {args.method}")
        graphs = _load_graphs(args.probes, args.num_probes)
        probes = make_probes(graphs, config.heads)
    kw = {"convention": args.convention} if args.method == "eapig" else {}
    table = score(args.method, params, config, probes, m=args.m, loss=args.loss, pooling=args.pooling,
                  gc=gc, **kw)
    table.to_csv(args.out, gc)
    print(f"wrote {gc.num_edges} {args.method} scores to {args.out}")


def cmd_discover(args):
    from .attribution import ScoreTable
    from .circuits import discover_circuit
    from .compgraph import build_computation_graph

    params, config, _ = _load_model(args.checkpoint)
    gc = build_computation_graph(params, config)
    table = ScoreTable.from_csv(_need_file(args.scores, "score file"), gc)
    circuit = discover_circuit(gc, table, args.k, params)
    circuit.save(args.out)
    dot = args.dot or os.path.splitext(args.out)[0] + ".dot"
    with open(dot, "w") as fh:
        fh.write(circuit.to_dot(gc))
    print(f"K={args.k}: {len(circuit)}-edge circuit written to {args.out} and {dot}")


def cmd_eval_circuit(args):
    from .circuits import Circuit

    params, config, _ = _load_model(args.checkpoint)
    circuit = Circuit.load(_need_file(args.circuit, "circuit"))
    graphs = _load_graphs(args.data)
    report = _circuit_metrics(params, config, circuit, graphs, args.rtol)
    report["dataset"] = os.path.abspath(args.data)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(_jsonable({k: v for k, v in report.items() if k not in ("per_task", "rule")}),
                     sort_keys=True))


def cmd_overlap(args):
    from .circuits import Circuit, weighted_jaccard

    params, _, _ = _load_model(args.checkpoint)
    circuits = [Circuit.load(_need_file(p, "circuit")) for p in args.circuits]
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.circuits]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + names)
        for name, a in zip(names, circuits):
            w.writerow([name] + [repr(weighted_jaccard(a, b, params)) for b in circuits])
    print(f"wrote {len(names)}x{len(names)} overlap matrix to {args.out}")


SWEEP_FIELDS = ("method", "K", "edges", "lmult_full", "lmult_circuit", "lmult_ablated", "reach_acc_full",
                "reach_acc_circuit", "reach_acc_ablated", "fid_plus", "fid_minus", "char")


def cmd_sweep_k(args):
    from .attribution import ScoreTable
    from .circuits import circuits_for_ks
    from .compgraph import build_computation_graph
    from .training import model_outputs

    params, config, _ = _load_model(args.checkpoint)
    gc = build_computation_graph(params, config)
    graphs = _load_graphs(args.data)
    full_out = model_outputs(params, config, graphs)
    rows = []
    for path in args.scores:
        table = ScoreTable.from_csv(_need_file(path, "score file"), gc)
        method = table.method or os.path.splitext(os.path.basename(path))[0]
        cache = {}
        for K, circ in circuits_for_ks(gc, table, args.k, params).items():
            key = frozenset(circ.refs)
            if key not in cache:
                cache[key] = _circuit_metrics(params, config, circ, graphs, args.rtol, full_out)
            rows.append({"method": method, "K": K, **{f: cache[key][f] for f in SWEEP_FIELDS[2:]}})
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_export_dot(args):
    from .circuits import Circuit, dot_for_edges
    from .compgraph import build_computation_graph

    params, config, _ = _load_model(args.checkpoint)
    gc = build_computation_graph(params, config)
    if args.circuit:
        circuit = Circuit.load(_need_file(args.circuit, "circuit"))
        ids = circuit.edge_ids(gc)
    else:
        ids = range(gc.num_edges)
    weights = np.array([params[p][r, c] for p, r, c in gc.edge_ref])
    with open(args.out, "w") as fh:
        fh.write(dot_for_edges(gc, ids, edge_weights=weights))
    print(f"wrote DOT with {len(ids)} edges to {args.out}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="minar", description="Neuron-level circuit discovery for MinAggGNNs.",
                                formatter_class=fmt)
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help="seed for every stochastic choice (falls back to $MINAR_SEED)")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen-data", help="write train.jsonl and test.jsonl", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--tasks", type=_tasks, default=("sp",), help="comma list of sp,bfs")
    s.add_argument("--K", type=int, default=2, help="path length parameter of the training set")
    s.add_argument("--L", type=int, default=2, help="Bellman-Ford rounds between features and labels")
    s.add_argument("--B", type=float, default=1000.0, help="feature value of unreached nodes")
    s.add_argument("--count", type=int, default=300, help="number of test graphs")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a MinAggGNN; writes checkpoints and train_log.csv",
                       formatter_class=fmt)
    s.add_argument("--train", required=True, help="training JSONL")
    s.add_argument("--test", default=None, help="test JSONL used for the log")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--tasks", type=_tasks, default=("sp",), help="comma list of sp,bfs")
    s.add_argument("--L", type=int, default=2, help="number of layers")
    s.add_argument("--epochs", type=int, default=20000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=0.01)
    s.add_argument("--l1", type=float, default=1e-3)
    s.add_argument("--mse-reduction", choices=("node_mean", "graph_sum"), default="node_mean")
    s.add_argument("--checkpoint-every", type=int, default=100)
    s.add_argument("--dense-checkpoint-every", type=int, default=25)
    s.add_argument("--dense-until", type=int, default=4000)
    s.add_argument("--eval-every", type=int, default=0, help="test evaluation cadence (0: every checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score every computation-graph edge", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--method", required=True, choices=("weight", "weightgrad", "eap", "eapig", "actpatch"))
    s.add_argument("--probes", default=None, help="JSONL of clean graphs; corrupted copies are derived")
    s.add_argument("--num-probes", type=int, default=None, help="use only the first N graphs")
    s.add_argument("--m", type=int, default=20, help="EAP-IG interpolation steps")
    s.add_argument("--convention", choices=("right", "left"), default="right", help="EAP-IG Riemann sum")
    s.add_argument("--pooling", choices=("mean", "sum"), default="mean")
    s.add_argument("--loss", choices=("mse", "train", "diff"), default=None,
                   help="probe loss (default: mse for single-task, train loss otherwise)")
    s.add_argument("--out", required=True, help="score CSV")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("discover", help="extract a circuit from scores", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--k", type=int, required=True, help="number of top edges to route paths through")
    s.add_argument("--out", required=True, help="circuit JSON")
    s.add_argument("--dot", default=None, help="DOT output (default: next to --out)")
    s.set_defaults(func=cmd_discover)

    s = sub.add_parser("eval-circuit", help="fidelity, characterization, L_Mult and accuracy of a circuit",
                       formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--circuit", required=True)
    s.add_argument("--data", required=True, help="evaluation JSONL")
    s.add_argument("--rtol", type=float, default=0.05, help="regression agreement tolerance")
    s.add_argument("--out", default=None, help="report JSON")
    s.set_defaults(func=cmd_eval_circuit)

    s = sub.add_parser("overlap", help="pairwise weighted-Jaccard matrix", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--circuits", nargs="+", required=True)
    s.add_argument("--out", required=True, help="matrix CSV")
    s.set_defaults(func=cmd_overlap)

    s = sub.add_parser("sweep-k", help="circuit metrics across a K list", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scores", nargs="+", required=True, help="one score CSV per method")
    s.add_argument("--data", required=True, help="evaluation JSONL")
    s.add_argument("--k", type=parse_ks, default=parse_ks(DEFAULT_KS),
                   help=f"K list, e.g. 1..10 or {LARGE_KS}")
    s.add_argument("--rtol", type=float, default=0.05)
    s.add_argument("--out", required=True, help="table CSV")
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("export-dot", help="DOT rendering of a circuit or the full graph", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--circuit", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_dot)
    return p


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise DataError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        args.func(args)
    except (DataError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"minar: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
