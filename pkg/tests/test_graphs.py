import heapq

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minar import graphs as G
from conftest import random_graph


def dijkstra(g):
    dist = np.full(g.n, np.inf)
    dist[g.source] = 0.0
    heap = [(0.0, g.source)]
    adj = [[] for _ in range(g.n)]
    for (u, v), w in zip(g.edges, g.weights):
        adj[u].append((v, w))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            if d + w < dist[v]:
                dist[v] = d + w
                heapq.heappush(heap, (d + w, v))
    return dist


def test_path_bellman_ford_by_hand():
    g = G.path_graph([2.0, 3.0], label_steps=2)
    assert G.k_step_bellman_ford(g, 0, 2).tolist() == [0.0, 2.0, 5.0]
    assert G.k_step_bellman_ford(g, 0, 0).tolist() == [0.0, 1000.0, 1000.0]
    assert G.k_step_bellman_ford(g, 0, 1).tolist() == [0.0, 2.0, 1000.0]


def test_bellman_ford_rejects_negative_k():
    with pytest.raises(G.GraphInputError):
        G.k_step_bellman_ford(G.path_graph([1.0]), 0, -1)


@given(st.integers(2, 9), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_bellman_ford_matches_dijkstra_and_is_monotone(n, seed):
    g = random_graph(np.random.default_rng(seed), n, 0.3)
    prev = G.k_step_bellman_ford(g, g.source, 0)
    for k in range(1, n):
        cur = G.k_step_bellman_ford(g, g.source, k)
        assert np.all(cur <= prev)
        prev = cur
    np.testing.assert_allclose(prev, dijkstra(g), rtol=0, atol=1e-12)


def test_bfs_examples():
    star_pairs = [(0, 1), (0, 2), (0, 3)]
    edges, w = G._undirected(star_pairs, [1.0, 1.0, 1.0])
    star = G.AttributedGraph(n=4, edges=edges, weights=w, x=np.zeros((4, 0)), source=0)
    assert G.k_step_bfs(star, 0, 0).tolist() == [1, 0, 0, 0]
    assert G.k_step_bfs(star, 0, 1).tolist() == [1, 1, 1, 1]


@pytest.mark.parametrize("seed", range(5))
def test_bfs_agrees_with_unit_weight_bellman_ford(seed):
    g = random_graph(np.random.default_rng(seed), 8, 0.2)
    g.weights = np.ones_like(g.weights)
    for k in range(4):
        assert np.array_equal(G.k_step_bfs(g, g.source, k) > 0, G.k_step_bellman_ford(g, g.source, k) < 1000)


def test_trainset_composition():
    tr = G.generate_bellman_ford_trainset(2, 0)
    family = [g for g in tr if "a" in g.meta]
    assert len(family) == 30
    assert {(g.meta["a"], g.meta["b"]) for g in family} == {(a, b) for a in range(5) for b in range(6)}
    assert sum(g.meta.get("family") == "H" for g in tr) == 1
    assert sum("extra" in g.meta for g in tr) == 8
    assert len(tr) == 30 + 1 + 2 + 8
    # every edge weight nonnegative, every graph has self-loops
    assert all(np.all(g.weights >= 0) and g.has_self_loops() for g in tr)


def test_trainset_special_paths():
    tr = G.generate_bellman_ford_trainset(2, 0)
    p1 = next(g for g in tr if g.meta.get("special") == "P1(1)")
    assert p1.x[:, 0].tolist() == [0.0, 1000.0]
    assert p1.labels["dist"].tolist() == [0.0, 1.0]
    p2 = next(g for g in tr if g.meta.get("special") == "P2(1,0)")
    # features are the state after one round; labels two rounds later
    assert p2.x[:, 0].tolist() == [0.0, 1.0, 1000.0]
    assert p2.labels["dist"].tolist() == [0.0, 1.0, 1.0]


def test_trainset_family_member():
    tr = G.generate_bellman_ford_trainset(2, 0)
    g = next(g for g in tr if g.meta.get("a") == 3 and g.meta.get("b") == 4)
    assert g.x[:, 0].tolist() == [0.0, 3.0, 1000.0, 1000.0]
    assert g.labels["dist"].tolist() == [0.0, 3.0, 7.0, 7.0]


def test_trainset_deterministic_and_validates_k():
    a = [g.to_dict() for g in G.generate_bellman_ford_trainset(2, 7)]
    b = [g.to_dict() for g in G.generate_bellman_ford_trainset(2, 7)]
    assert a == b
    with pytest.raises(G.GraphInputError):
        G.generate_bellman_ford_trainset(0, 0)


def test_h_gadget_shape():
    h = G.h_gadget(2)
    assert h.n == 4
    # after two rounds node 2 has switched to the unit path, but its pendant
    # still carries the one-round value that came over the direct edge
    assert h.labels["dist"].tolist() == [0.0, 1.0, 2.0, 5.0]


@pytest.fixture(scope="module")
def small_testset():
    return G.generate_ood_testset(0, 40)


def test_testset_families(small_testset):
    fams = {g.meta["family"] for g in small_testset}
    assert fams == {"cycle", "complete", "er", "tree2", "tree3"}
    for g in small_testset:
        if g.meta["family"] in ("complete", "er"):
            assert 5 <= g.n <= 200
        if g.meta["family"] == "complete":
            assert g.num_edges == g.n * (g.n - 1) + g.n


def test_testset_labels_are_sound(small_testset):
    for g in small_testset:
        assert np.array_equal(g.labels["dist"], G.k_step_bellman_ford(g, g.source, 2))
        assert np.array_equal(g.labels["reach"], G.k_step_bfs(g, g.source, 2))
        assert np.all(g.weights >= 0)


def test_testset_trees_have_far_nodes(small_testset):
    tree = next(g for g in small_testset if g.meta["family"] == "tree2")
    assert np.any(G.hop_distances(tree, tree.source) > 2)


def test_testset_prefix_is_stable():
    a = G.generate_ood_testset(3, 12)
    b = G.generate_ood_testset(3, 25)[:12]
    assert [g.to_dict() for g in a] == [g.to_dict() for g in b]
    with pytest.raises(G.GraphInputError):
        G.generate_ood_testset(0, 0)


def test_encode_examples():
    g = G.path_graph([1.0, 1.0])
    assert G.encode_task_features(g, ("sp",)).x[:, 0].tolist() == [0.0, 1000.0, 1000.0]
    both = G.encode_task_features(g, ("sp", "bfs"))
    assert both.x.tolist() == [[0.0, 1.0], [1000.0, 0.0], [1000.0, 0.0]]
    again = G.encode_task_features(both, ("sp", "bfs"))
    assert np.array_equal(again.x, both.x)
    nosrc = g.copy()
    nosrc.source = None
    with pytest.raises(G.GraphInputError):
        G.encode_task_features(nosrc)


def test_corruption_examples():
    g = G.path_graph([1.0, 2.0], tasks=("sp", "bfs"))
    pair = G.corrupt_instance(g, ("sp", "bfs"))
    assert pair.corrupted.x[:, 0].tolist() == [1000.0, 0.0, 0.0]
    assert pair.corrupted.x[:, 1].tolist() == [0.0, 1.0, 1.0]
    assert np.all(pair.corrupted.weights == 0)
    assert np.array_equal(pair.clean.edges, pair.corrupted.edges)
    twice = G.corrupt_instance(pair.corrupted, ("sp", "bfs")).corrupted
    assert np.array_equal(twice.x, g.x)
    assert np.all(twice.weights == 0)


def test_probe_pair_alignment_is_enforced():
    a, b = G.path_graph([1.0]), G.path_graph([1.0, 1.0])
    with pytest.raises(G.GraphInputError):
        G.ProbePair(a, b)


def test_graph_validation():
    with pytest.raises(G.GraphInputError):
        G.AttributedGraph(n=2, edges=[[0, 2]], weights=[1.0], x=np.zeros((2, 1)))
    with pytest.raises(G.GraphInputError):
        G.AttributedGraph(n=2, edges=[[0, 1]], weights=[1.0, 2.0], x=np.zeros((2, 1)))


def test_self_loop_helpers():
    g = G.path_graph([1.0], self_loops=False)
    assert not g.has_self_loops()
    h = G.add_self_loops(g)
    assert h.num_edges == g.num_edges + 2 and h.has_self_loops()
    assert G.remove_self_loops(h).num_edges == g.num_edges


def test_jsonl_round_trip(tmp_path, small_testset):
    path = tmp_path / "g.jsonl"
    G.write_jsonl(small_testset[:6], path)
    back = G.read_jsonl(path)
    for a, b in zip(small_testset[:6], back):
        assert a.to_dict() == b.to_dict()


def test_bfs_trainset_counts_hops_from_the_source():
    tr = G.generate_bellman_ford_trainset(2, 0, tasks=("sp", "bfs"))
    for g in tr:
        flag = np.zeros(g.n)
        flag[g.source] = 1.0
        assert np.array_equal(g.x[:, 1], flag)
        assert np.array_equal(g.labels["reach"], G.k_step_bfs(g, g.source, 2))
    # P_3^(1)(a, b, 0): the last node is three hops out, so both classes occur
    g = next(g for g in tr if g.meta.get("a") == 1 and g.meta.get("b") == 1)
    assert g.labels["reach"].tolist() == [1.0, 1.0, 1.0, 0.0]
    assert g.labels["dist"][3] == 2.0
