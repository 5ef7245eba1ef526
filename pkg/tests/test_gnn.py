import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minar import graphs as G
from minar.compgraph import build_computation_graph
from minar.gnn import (EmptyNeighborhoodError, GINEConfig, ModelConfig, ModelConfigError, aggregate,
                       bellman_ford_params, check_params, gine_forward, gine_layer_forward, init_gine_params,
                       init_params, make_batch, min_via_relu_params, minagg_layer_forward, model_forward)
from conftest import random_graph


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ModelConfigError):
        ModelConfig(hidden=0)
    with pytest.raises(ModelConfigError):
        ModelConfig(heads=())
    with pytest.raises(ModelConfigError):
        ModelConfig(aggregation="mean")
    cfg = ModelConfig.for_tasks(("sp", "bfs"))
    assert cfg.in_dim == 2 and cfg.heads == ("sp", "bfs")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("tasks, edges", [(("sp",), 18240), (("sp", "bfs"), 18432)])
def test_weight_counts(tasks, edges):
    cfg = ModelConfig.for_tasks(tasks)
    n_weights = sum(int(np.prod(s)) for k, s in cfg.param_shapes().items() if k.endswith("weight"))
    assert n_weights == edges


def test_check_params_catches_shape_errors(sp_config):
    p = init_params(sp_config, 0)
    check_params(p, sp_config)
    p["convs.0.agg_mlp.lins.0.weight"] = p["convs.0.agg_mlp.lins.0.weight"][:, :1]
    with pytest.raises(ModelConfigError):
        check_params(p, sp_config)
    del p["convs.0.agg_mlp.lins.0.weight"]
    with pytest.raises(ModelConfigError):
        check_params(p, sp_config)


def test_init_is_seeded(sp_config):
    a, b, c = init_params(sp_config, 3), init_params(sp_config, 3), init_params(sp_config, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["convs.0.agg_mlp.lins.0.weight"], c["convs.0.agg_mlp.lins.0.weight"])


def test_coordinatewise_min():
    msgs = np.array([[3.0, 5.0], [4.0, 1.0], [6.0, 2.0]])
    agg, arg = aggregate(msgs, np.array([0, 3]))
    assert agg.tolist() == [[3.0, 1.0]]
    assert arg.tolist() == [[0, 1]]


def test_min_ties_pick_first_message():
    agg, arg = aggregate(np.array([[1.0], [1.0], [2.0]]), np.array([0, 3]))
    assert arg.tolist() == [[0]]
    agg, arg = aggregate(np.array([[1.0], [1.0], [0.5]]), np.array([0, 3]), "max")
    assert agg.tolist() == [[1.0]] and arg.tolist() == [[0]]


def test_empty_neighbourhood_is_an_error(sp_config, bf_params):
    g = G.path_graph([1.0], self_loops=False)
    g.edges, g.weights = g.edges[:1], g.weights[:1]   # node 0 keeps no in-edge
    with pytest.raises(EmptyNeighborhoodError):
        model_forward(bf_params, sp_config, g)


def test_two_node_path_bellman_ford(sp_config, bf_params):
    g = G.path_graph([3.0])
    assert model_forward(bf_params, sp_config, g)[:, 0].tolist() == [0.0, 3.0]


def test_bf_params_have_ten_weights(bf_params):
    assert sum(int(np.count_nonzero(v)) for k, v in bf_params.items() if k.endswith("weight")) == 10


@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("seed", range(4))
def test_depth_matches_k_step_bellman_ford(depth, seed):
    cfg = ModelConfig(depth=depth)
    g = random_graph(np.random.default_rng(seed), 9, 0.3)
    out = model_forward(bellman_ford_params(cfg), cfg, g)[:, 0]
    assert np.array_equal(out, G.k_step_bellman_ford(g, g.source, depth))


def test_single_layer_is_one_relaxation(sp_config, bf_params):
    g = random_graph(np.random.default_rng(5), 7, 0.4)
    b = make_batch(g)
    h = minagg_layer_forward(bf_params, 0, b.x, b)
    assert np.array_equal(h[:, 0], G.k_step_bellman_ford(g, g.source, 1))


def test_self_loop_singleton(sp_config):
    p = init_params(sp_config, 1)
    g = G.AttributedGraph(n=1, edges=[[0, 0]], weights=[0.0], x=[[2.5]], source=0)
    b = make_batch(g)
    # the only message is the node's own, so the layer is f_up(h, f_agg(h, 0))
    a = np.maximum(np.array([2.5, 0.0]) @ p["convs.0.agg_mlp.lins.0.weight"].T + p["convs.0.agg_mlp.lins.0.bias"], 0)
    m = a @ p["convs.0.agg_mlp.lins.1.weight"].T + p["convs.0.agg_mlp.lins.1.bias"]
    u = np.maximum(np.concatenate([[2.5], m]) @ p["convs.0.up_mlp.lins.0.weight"].T + p["convs.0.up_mlp.lins.0.bias"], 0)
    expect = u @ p["convs.0.up_mlp.lins.1.weight"].T + p["convs.0.up_mlp.lins.1.bias"]
    np.testing.assert_allclose(minagg_layer_forward(p, 0, b.x, b)[0], expect, rtol=1e-14)


def test_zero_weights_give_constant_outputs():
    cfg = ModelConfig.for_tasks(("sp", "bfs"))
    p = {k: np.zeros(s) for k, s in cfg.param_shapes().items()}
    p["convs.1.up_mlp.lins.1.bias"][:] = [1.5, -0.5]
    g = random_graph(np.random.default_rng(0), 6, tasks=("sp", "bfs"))
    assert np.all(model_forward(p, cfg, g) == np.array([1.5, -0.5]))


@given(st.floats(0, 500), st.floats(0, 500))
@settings(max_examples=60, deadline=None)
def test_min_via_relu_update(a, b):
    cfg = ModelConfig(depth=1)
    p = min_via_relu_params(cfg)
    # node 1 sees only node 0 (message a + 0) while holding its own value b
    g = G.AttributedGraph(n=2, edges=[[0, 1], [0, 0]], weights=[0.0, 0.0], x=[[a], [b]], source=0)
    out = model_forward(p, cfg, g)[1, 0]
    assert out == pytest.approx(min(a, b), abs=1e-9)


def test_min_via_relu_without_self_loops():
    cfg = ModelConfig(self_loops=False)
    p = min_via_relu_params(cfg)
    g = random_graph(np.random.default_rng(2), 8, 0.3, self_loops=False)
    out = model_forward(p, cfg, g)[:, 0]
    np.testing.assert_allclose(out, G.k_step_bellman_ford(g, g.source, 2), atol=1e-9)
    with pytest.raises(ModelConfigError):
        min_via_relu_params(ModelConfig(hidden=1))


def test_chunked_forward_equals_single_batch(sp_config):
    p = init_params(sp_config, 0)
    gs = G.generate_ood_testset(0, 12)
    full = model_forward(p, sp_config, make_batch(gs))
    np.testing.assert_allclose(model_forward(p, sp_config, gs), full, rtol=0, atol=0)


def test_layer_removal_shrinks_graph():
    a = build_computation_graph(init_params(ModelConfig(depth=2), 0), ModelConfig(depth=2))
    b = build_computation_graph(init_params(ModelConfig(depth=1), 0), ModelConfig(depth=1))
    assert b.num_vertices < a.num_vertices and b.num_edges < a.num_edges


# --------------------------------------------------------------------------
# GINE
# --------------------------------------------------------------------------

def _identity_gine():
    cfg = GINEConfig(dim=1, edge_dim=1, hidden=1, depth=1)
    p = {k: np.zeros(s) for k, s in cfg.param_shapes().items()}
    p["convs.0.nn.lins.0.weight"][0, 0] = 1.0
    p["convs.0.nn.lins.1.weight"][0, 0] = 1.0
    return cfg, p


def test_gine_three_node_fixture():
    _, p = _identity_gine()
    edges, w = G._undirected([(0, 1), (1, 2)], [1.0, 1.0])
    g = G.AttributedGraph(n=3, edges=edges, weights=w, x=[[1.0], [2.0], [3.0]], source=0)
    b = make_batch(g)
    out = gine_layer_forward(p, 0, b.x, b)
    assert out[1, 0] == 5.0
    assert out[0, 0] == 1.0 + 2.0 and out[2, 0] == 3.0 + 2.0


def test_gine_zero_in_zero_out():
    cfg = GINEConfig()
    p = init_gine_params(cfg, 0)
    for k in p:
        if k.endswith("bias"):
            p[k][:] = 0
    g = random_graph(np.random.default_rng(0), 5)
    b = make_batch(g, x=np.zeros((5, cfg.dim)), edge_weights=np.zeros(g.num_edges))
    assert np.all(gine_forward(p, cfg, b) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_gine_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    cfg = GINEConfig()
    p = init_gine_params(cfg, seed)
    g = random_graph(rng, 10, 0.3)
    x = rng.normal(size=(g.n, cfg.dim))
    out = gine_forward(p, cfg, make_batch(g, x=x), steps=2)
    perm = rng.permutation(g.n)
    inv = np.argsort(perm)
    h = g.copy()
    h.edges = inv[g.edges]
    h.x = g.x[perm]
    out_p = gine_forward(p, cfg, make_batch(h, x=x[perm]), steps=2)
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_minagg_permutation_equivariance(seed, sp_config):
    rng = np.random.default_rng(seed)
    p = init_params(sp_config, seed)
    g = random_graph(rng, 10, 0.3)
    perm = rng.permutation(g.n)
    inv = np.argsort(perm)
    h = g.copy()
    h.edges, h.x, h.source = inv[g.edges], g.x[perm], int(inv[g.source])
    # row order changes BLAS blocking, so allow a few ulps
    np.testing.assert_allclose(model_forward(p, sp_config, h), model_forward(p, sp_config, g)[perm], rtol=1e-12, atol=1e-12)


def test_gine_single_neighbour_reduces():
    cfg, p = _identity_gine()
    p["convs.0.lin_edge.weight"][0, 0] = 0.5
    g = G.AttributedGraph(n=2, edges=[[0, 1], [1, 0]], weights=[2.0, 2.0], x=[[1.0], [3.0]], source=0)
    b = make_batch(g)
    out = gine_layer_forward(p, 0, b.x, b)
    assert out[1, 0] == 3.0 + 1.0 + 0.5 * 2.0


def test_gine_edge_projection_shape_checked():
    cfg = GINEConfig(dim=2)
    p = init_gine_params(cfg, 0)
    g = random_graph(np.random.default_rng(0), 4)
    b = make_batch(g, x=np.zeros((4, 3)))
    with pytest.raises(ModelConfigError):
        gine_layer_forward(p, 0, b.x, b)
