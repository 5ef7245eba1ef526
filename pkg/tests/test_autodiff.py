import numpy as np
import pytest

from minar import graphs as G
from minar.autodiff import (TraceConsistencyError, backpropagate, evaluate_with_trace,
                            finite_difference_gradient, linear_names, loss_and_grad, params_fingerprint)
from minar.gnn import ModelConfig, bellman_ford_params, init_params, make_batch
from conftest import random_graph


def sq_loss(target):
    def fn(out):
        d = out - target
        return float(np.sum(d ** 2)), 2 * d
    return fn


def rel_err(a, b, floor=1e-6):
    mask = (np.abs(a) > floor) | (np.abs(b) > floor)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - b[mask]) / np.maximum(np.abs(a[mask]), np.abs(b[mask]))))


# raw encoding (features 0 / B) and settled distances; both lie in [0, B]
FD_FIXTURES = [dict(init_step=0), dict(init_step=5)]
# rounding error of central differences is ~eps * |loss| / step, and losses
# reach ~1e6 with B-valued features, so 1e-5 is too small a step
FD_STEP = 1e-4


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("tasks", [("sp",), ("sp", "bfs")])
@pytest.mark.parametrize("fixture", FD_FIXTURES, ids=["raw", "settled"])
def test_gradients_match_finite_differences(seed, tasks, fixture, small_config):
    cfg = ModelConfig(hidden=small_config.hidden, message_dim=small_config.message_dim,
                      embed_dim=small_config.embed_dim, in_dim=len(tasks), heads=tasks)
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    g = random_graph(rng, 5, 0.5, tasks=tasks, **fixture)
    target = rng.normal(size=(g.n, len(tasks)))
    loss = sq_loss(target)
    _, rec, _ = loss_and_grad(p, cfg, g, loss)
    fd = finite_difference_gradient(p, cfg, g, lambda o: loss(o)[0], step=FD_STEP)
    for name in p:
        assert rel_err(rec.params[name], fd.params[name]) < 1e-4, name
    assert rel_err(rec.x, fd.x) < 1e-4
    assert rel_err(rec.edge_attr, fd.edge_attr) < 1e-4


def test_full_width_gradient_subset(sp_config):
    p = init_params(sp_config, 0)
    g = random_graph(np.random.default_rng(1), 4, 0.6)
    loss = sq_loss(np.ones((g.n, 1)))
    _, rec, _ = loss_and_grad(p, sp_config, g, loss)
    names = [n for n in p if n.endswith("bias")]
    fd = finite_difference_gradient(p, sp_config, g, lambda o: loss(o)[0], step=FD_STEP, names=names)
    for name in names:
        assert rel_err(rec.params[name], fd.params[name]) < 1e-4, name


def test_linear_case_gradient_is_exact():
    """With every ReLU active and a single message per node, d out / d x is a product of weights."""
    cfg = ModelConfig(depth=1, hidden=1, message_dim=1, embed_dim=1, self_loops=False)
    p = {k: np.zeros(s) for k, s in cfg.param_shapes().items()}
    p["convs.0.agg_mlp.lins.0.weight"][:] = [[2.0, 0.0]]
    p["convs.0.agg_mlp.lins.1.weight"][:] = [[3.0]]
    p["convs.0.up_mlp.lins.0.weight"][:] = [[0.0, 5.0]]
    p["convs.0.up_mlp.lins.1.weight"][:] = [[7.0]]
    g = G.AttributedGraph(n=2, edges=[[0, 1], [1, 0]], weights=[0.0, 0.0], x=[[1.0], [1.0]], source=0)
    _, rec, _ = loss_and_grad(p, cfg, g, lambda o: (float(o[1, 0]), np.array([[0.0], [1.0]])))
    assert rec.x[:, 0].tolist() == [2 * 3 * 5 * 7, 0.0]


def test_argmin_routing(sp_config, bf_params):
    g = G.AttributedGraph(n=3, edges=[[0, 2], [1, 2], [0, 0], [1, 1], [2, 2]],
                          weights=[1.0, 5.0, 0.0, 0.0, 0.0], x=[[0.0], [0.0], [100.0]], source=0)
    cfg = ModelConfig(depth=1)
    p = bellman_ford_params(cfg)
    out, trace = evaluate_with_trace(p, cfg, g)
    assert out[2, 0] == 1.0
    assert trace.argmin_neighbors(0)[2, 0] == 0
    seed = np.zeros_like(out)
    seed[2, 0] = 1.0
    rec = backpropagate(trace, p, seed)
    b = trace.batch
    ew = np.zeros(len(b.src))
    ew[:] = rec.edge_attr[:, 0]
    winner = np.flatnonzero((b.src == 0) & (b.dst == 2))
    assert ew[winner].tolist() == [1.0]
    assert np.count_nonzero(ew) == 1


def test_stale_trace_rejected(sp_config):
    p = init_params(sp_config, 0)
    g = random_graph(np.random.default_rng(0), 4)
    out, trace = evaluate_with_trace(p, sp_config, g)
    q = dict(p)
    q["convs.0.up_mlp.lins.1.bias"] = p["convs.0.up_mlp.lins.1.bias"] + 1
    with pytest.raises(TraceConsistencyError):
        backpropagate(trace, q, np.ones_like(out))
    with pytest.raises(TraceConsistencyError):
        backpropagate(trace, p, np.ones((1, 1)))


def test_fingerprint_is_order_independent(sp_config):
    p = init_params(sp_config, 0)
    rev = dict(reversed(list(p.items())))
    assert params_fingerprint(p) == params_fingerprint(rev)
    assert params_fingerprint(p) != params_fingerprint(init_params(sp_config, 1))


def test_backprop_is_deterministic(sp_config):
    p = init_params(sp_config, 0)
    g = G.generate_ood_testset(0, 3)
    recs = [loss_and_grad(p, sp_config, make_batch(g), sq_loss(0.0))[1] for _ in range(2)]
    for k in recs[0].params:
        assert np.array_equal(recs[0].params[k], recs[1].params[k])
    assert recs[0].all_finite()


def test_trace_records_every_linear(sp_config):
    p = init_params(sp_config, 0)
    g = random_graph(np.random.default_rng(0), 5)
    out, trace = evaluate_with_trace(p, sp_config, g)
    assert sorted(trace.pre) == sorted(linear_names(sp_config))
    e = trace.batch.num_edges
    assert trace.pre["convs.0.agg_mlp.lins.0"].shape == (e, sp_config.hidden)
    assert trace.pre["convs.1.up_mlp.lins.1"].shape == out.shape
    np.testing.assert_array_equal(trace.neuron_activation("convs.0.up_mlp.lins.0.3"),
                                  np.maximum(trace.pre["convs.0.up_mlp.lins.0"][:, 3], 0))
    for name, pre in trace.pre.items():
        w = p[name + ".weight"]
        np.testing.assert_allclose(trace.inputs[name] @ w.T + p[name + ".bias"], pre, rtol=1e-12, atol=1e-12)


def test_fd_step_validation(sp_config):
    with pytest.raises(ValueError):
        finite_difference_gradient(init_params(sp_config, 0), sp_config, G.path_graph([1.0]), lambda o: 0.0, step=0)


def test_fd_quadratic_example():
    cfg = ModelConfig(depth=1, hidden=1, message_dim=1, embed_dim=1)
    p = {k: np.zeros(s) for k, s in cfg.param_shapes().items()}
    p["convs.0.up_mlp.lins.1.bias"][:] = 1.0
    g = G.path_graph([1.0])
    fd = finite_difference_gradient(p, cfg, g, lambda o: float((o[0, 0] - 3.0) ** 2), step=1e-5,
                                    names=["convs.0.up_mlp.lins.1.bias"])
    assert abs(fd.params["convs.0.up_mlp.lins.1.bias"][0] + 4.0) < 1e-6
    zero = finite_difference_gradient(p, cfg, g, lambda o: 0.0)
    assert all(np.all(v == 0) for v in zero.params.values()) and np.all(zero.x == 0)


def test_trace_free_forward_is_identical(sp_config):
    from minar.gnn import model_forward
    p = init_params(sp_config, 3)
    g = random_graph(np.random.default_rng(3), 8)
    out, _ = evaluate_with_trace(p, sp_config, g)
    assert np.array_equal(out, model_forward(p, sp_config, g))


def test_non_selected_neighbour_gets_no_gradient():
    cfg = ModelConfig(depth=1)
    p = bellman_ford_params(cfg)
    g = G.path_graph([2.0])   # node 1 sees the source (0 + 2) and itself (1000)
    out, trace = evaluate_with_trace(p, cfg, g)
    assert trace.argmin_neighbors(0)[1, 0] == 0
    seed = np.zeros_like(out)
    seed[1, 0] = 1.0
    rec = backpropagate(trace, p, seed)
    assert rec.x[1, 0] == 0.0 and rec.x[0, 0] == 1.0
