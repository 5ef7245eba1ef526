"""Numba vs numpy timings for the hot kernels and an end-to-end test-set evaluation.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Kernel rows
call both implementations in-process and check that their outputs agree;
the end-to-end row runs ``evaluate`` in a subprocess with and without
``MINAR_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from minar import _kernels
from minar.compgraph import build_computation_graph
from minar.gnn import ModelConfig, init_params


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def kernel_cases(rng):
    # message tensor shaped like one layer over the 300-graph test set (~1.3M edges)
    # would need ~700 MB, so use a 200-node complete graph (40k edges, 64 channels)
    n, deg, d = 200, 200, 64
    ptr = np.arange(0, n * deg + 1, deg, dtype=np.int64)
    values = rng.normal(size=(n * deg, d))
    index = np.repeat(np.arange(n), deg)
    yield "segment_min", (_kernels.segment_min_numpy, "_segment_min_nb"), (values, ptr)
    yield "scatter_add", (_kernels.scatter_add_numpy, "_scatter_add_nb"), (values, index, n)

    cfg = ModelConfig()
    gc = build_computation_graph(init_params(cfg, 0), cfg)
    ptr, nbr, eid = gc.adjacency("in")
    score = rng.random(gc.num_edges)[eid]
    yield "longest_path_dp", (_kernels.longest_path_dp_numpy, "_longest_path_dp_nb"), \
        (gc.order, ptr, nbr, score, gc.kind == 0)


def end_to_end(disable):
    code = (
        "import time; from minar.gnn import ModelConfig, init_params; from minar.training import evaluate;"
        "from minar.graphs import generate_ood_testset; te = generate_ood_testset(0, 300);"
        "cfg = ModelConfig(); p = init_params(cfg, 0); evaluate(p, cfg, te[:5]);"
        "t = time.perf_counter(); evaluate(p, cfg, te); print(time.perf_counter() - t)"
    )
    env = dict(os.environ, MINAR_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true", help="skip the subprocess evaluation benchmark")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled (MINAR_DISABLE_NUMBA); nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}  match")
    for name, (np_fn, nb_name), inputs in kernel_cases(rng):
        nb_fn = getattr(_kernels, nb_name)
        nb_fn(*inputs)  # compile (or load from cache) outside the timing
        t_np, out_np = best_of(lambda: np_fn(*inputs), args.repeat)
        t_nb, out_nb = best_of(lambda: nb_fn(*inputs), args.repeat)
        if not isinstance(out_np, tuple):
            out_np, out_nb = (out_np,), (out_nb,)
        match = all(np.allclose(a, b, rtol=1e-12, atol=1e-12) for a, b in zip(out_np, out_nb))
        print(f"{name:<18}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>8.1f}x  {match}")

    if not args.skip_e2e:
        t_np, t_nb = end_to_end(True), end_to_end(False)
        print(f"{'evaluate(300)':<18}{1e3 * t_np:>12.0f}{1e3 * t_nb:>12.0f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
