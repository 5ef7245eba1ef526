"""Hot inner loops: segment min/argmin, scatter-add, and DAG longest-path DP.

Each kernel has a numba ``@njit`` version and a pure-numpy fallback with the
same signature and bit-identical results.  Set ``MINAR_DISABLE_NUMBA=1`` to
force the numpy path (useful for debugging and for the benchmark).
"""

import os

import numpy as np

_DISABLED = os.environ.get("MINAR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def segment_min_numpy(values, ptr):
    """Per-segment, per-column minimum of ``values`` and the first row attaining it.

    ``ptr`` is a CSR pointer: segment ``v`` spans rows ``ptr[v]:ptr[v+1]``.
    Every segment must be nonempty.
    """
    starts = ptr[:-1]
    mins = np.minimum.reduceat(values, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(ptr))
    rows = np.arange(values.shape[0])[:, None]
    cand = np.where(values == mins[seg], rows, values.shape[0])
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return mins, arg.astype(np.int64)


def scatter_add_numpy(values, index, n):
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def longest_path_dp_numpy(order, ptr, nbr, score, terminal):
    """Best score of any path from ``v`` to a terminal vertex, plus the chosen edge.

    The adjacency (``ptr``, ``nbr``, ``score``) lists, for each vertex, the
    edges to explore; ``order`` must visit every neighbour before the vertex
    itself.  Ties keep the edge listed first, so callers sort adjacency by
    neighbour id.  Returns ``(best, choice)`` with ``-inf`` / ``-1`` for
    vertices that cannot reach a terminal.
    """
    n = len(ptr) - 1
    best = np.full(n, -np.inf)
    choice = np.full(n, -1, dtype=np.int64)
    for v in order:
        if terminal[v]:
            best[v] = 0.0
            continue
        lo, hi = ptr[v], ptr[v + 1]
        if lo == hi:
            continue
        cand = best[nbr[lo:hi]] + score[lo:hi]
        k = int(np.argmax(cand))
        if np.isfinite(cand[k]):
            best[v] = cand[k]
            choice[v] = lo + k
    return best, choice


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _segment_min_nb(values, ptr):
        n = ptr.shape[0] - 1
        d = values.shape[1]
        mins = np.empty((n, d))
        arg = np.empty((n, d), dtype=np.int64)
        for v in range(n):
            lo = ptr[v]
            hi = ptr[v + 1]
            for k in range(d):
                best = values[lo, k]
                bi = lo
                for r in range(lo + 1, hi):
                    if values[r, k] < best:
                        best = values[r, k]
                        bi = r
                mins[v, k] = best
                arg[v, k] = bi
        return mins, arg

    @njit(cache=True)
    def _scatter_add_nb(values, index, n):
        out = np.zeros((n, values.shape[1]))
        for r in range(values.shape[0]):
            i = index[r]
            for k in range(values.shape[1]):
                out[i, k] += values[r, k]
        return out

    @njit(cache=True)
    def _longest_path_dp_nb(order, ptr, nbr, score, terminal):
        n = ptr.shape[0] - 1
        best = np.full(n, -np.inf)
        choice = np.full(n, -1, dtype=np.int64)
        for t in range(order.shape[0]):
            v = order[t]
            if terminal[v]:
                best[v] = 0.0
                continue
            for e in range(ptr[v], ptr[v + 1]):
                c = best[nbr[e]] + score[e]
                if c > best[v]:
                    best[v] = c
                    choice[v] = e
        return best, choice


def segment_min(values, ptr):
    values = np.ascontiguousarray(values, dtype=np.float64)
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    if HAVE_NUMBA:
        return _segment_min_nb(values, ptr)
    return segment_min_numpy(values, ptr)


def scatter_add(values, index, n):
    values = np.ascontiguousarray(values, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if HAVE_NUMBA:
        return _scatter_add_nb(values, index, n)
    return scatter_add_numpy(values, index, n)


def longest_path_dp(order, ptr, nbr, score, terminal):
    args = (
        np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(ptr, dtype=np.int64),
        np.ascontiguousarray(nbr, dtype=np.int64),
        np.ascontiguousarray(score, dtype=np.float64),
        np.ascontiguousarray(terminal, dtype=np.bool_),
    )
    if HAVE_NUMBA:
        return _longest_path_dp_nb(*args)
    return longest_path_dp_numpy(*args)
