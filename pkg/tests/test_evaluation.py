import numpy as np
import pydot
import pytest
from conftest import fc_specs, left_expanded, random_tree

from antree.autodiff import Tensor
from antree.data import Dataset
from antree.evaluation import (
    ensemble_predict,
    evaluate,
    evaluate_ensemble,
    export_dot,
    least_likely_path_eval,
    node_statistics,
    prune_rarely_visited,
    sampled_path_eval,
)
from antree.tree import Task, make_root_model, predict_multi_path, split_leaf


def _data(model, n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n,) + model.input_shape)
    if model.task.kind == "classification":
        return Dataset(x, rng.integers(model.task.dim, size=n), model.task)
    return Dataset(x, rng.normal(size=(n, model.task.dim)), model.task)


def _fixed_two_leaf(r, left_class, right_class):
    """Two leaves with confident, constant predictions and a constant router."""
    m = make_root_model(Task.classification(3), (2,), fc_specs(), 0, use_transformer=False)
    m = split_leaf(m, 0, m.specs.router, m.specs.solver, 1)
    m.routers[0].params["0.weight"] = Tensor(np.zeros((1, 2)))
    m.routers[0].params["0.bias"] = Tensor(np.array([np.log(r / (1 - r))]))
    for leaf, cls in ((1, left_class), (2, right_class)):
        bias = np.full(3, -20.0)
        bias[cls] = 20.0
        m.solvers[leaf].params["0.weight"] = Tensor(np.zeros((3, 2)))
        m.solvers[leaf].params["0.bias"] = Tensor(bias)
    return m


def test_evaluate_report_fields():
    m = random_tree(1, depth=3)
    d = _data(m)
    rep = evaluate(m, d)
    assert rep.num_samples == 40 and rep.num_leaves == m.num_leaves
    assert 0 <= rep.error_multi <= 100 and 0 <= rep.error_single <= 100
    assert rep.params_single <= rep.params_multi and rep.flops_single <= rep.flops_multi
    assert abs(sum(rep.leaf_visit_prob.values()) - 1) < 1e-9
    assert abs(sum(rep.leaf_single_path_freq.values()) - 1) < 1e-12
    assert sum(rep.router_polarization) == 40 * len(m.internal_nodes())
    assert '"error_multi"' in rep.to_text()


def test_evaluate_regression_mse():
    m = make_root_model(Task.regression(2), (2,), fc_specs(solver="lr"), 0, use_transformer=False)
    m.solvers[0].params["0.weight"] = Tensor(np.zeros((2, 2)))
    m.solvers[0].params["0.bias"] = Tensor(np.array([1.0, -1.0]))
    d = Dataset(np.zeros((3, 2)), np.zeros((3, 2)), m.task)
    rep = evaluate(m, d)
    assert rep.error_multi == 1.0 and rep.error_single == 1.0


def test_least_likely_uses_smaller_reach_leaf():
    # the router sends 0.9 to the left leaf (class 0); the least likely leaf predicts class 2
    m = _fixed_two_leaf(0.9, 0, 2)
    d = Dataset(np.zeros((4, 2)), np.array([0, 0, 0, 2]), m.task)
    assert least_likely_path_eval(m, d) == 75.0
    assert evaluate(m, d).error_multi == 25.0


def test_least_likely_tie_goes_to_lowest_leaf_id():
    m = _fixed_two_leaf(0.5, 1, 2)
    d = Dataset(np.zeros((2, 2)), np.array([1, 1]), m.task)
    assert least_likely_path_eval(m, d) == 0.0


def test_least_likely_needs_two_leaves():
    m = make_root_model(Task.classification(3), (2,), fc_specs(), 0)
    with pytest.raises(ValueError):
        least_likely_path_eval(m, _data(m))


def test_sampled_path_eval_extremes():
    m = _fixed_two_leaf(1 - 1e-7, 0, 2)
    d = Dataset(np.zeros((200, 2)), np.zeros(200, dtype=int), m.task)
    assert sampled_path_eval(m, d, 0) <= 0.5
    m = _fixed_two_leaf(0.5, 0, 2)
    err = sampled_path_eval(m, Dataset(np.zeros((2000, 2)), np.zeros(2000, dtype=int), m.task), 3)
    assert 45.0 <= err <= 55.0
    assert sampled_path_eval(m, d, 3) == sampled_path_eval(m, d, 3)


def test_ensemble_is_arithmetic_mean():
    members = [random_tree(s, depth=2) for s in range(3)]
    x = np.random.default_rng(0).normal(size=5)
    expected = np.mean([predict_multi_path(m, x).probs for m in members], axis=0)
    np.testing.assert_allclose(ensemble_predict(members, x).probs, expected, rtol=0, atol=1e-15)
    one = ensemble_predict(members[:1], x).probs
    np.testing.assert_array_equal(one, predict_multi_path(members[0], x).probs)
    assert abs(ensemble_predict(members, x).probs.sum() - 1) < 1e-12


def test_ensemble_report_and_checks():
    members = [random_tree(s, depth=2) for s in range(2)]
    out = evaluate_ensemble(members, _data(members[0]))
    assert out["members"] == 2 and 0 <= out["error_multi"] <= 100
    with pytest.raises(ValueError):
        ensemble_predict([], np.zeros(5))
    other = make_root_model(Task.classification(4), (5,), fc_specs(), 0)
    with pytest.raises(ValueError):
        ensemble_predict([members[0], other], np.zeros(5))


def test_node_statistics_reach_sums():
    m = random_tree(6, depth=4)
    stats = node_statistics(m, _data(m, 30))
    visit = dict(zip(stats.nodes, stats.visit_prob))
    assert visit[m.root] == pytest.approx(1.0, abs=1e-12)
    for n in m.internal_nodes():
        nd = m.nodes[n]
        assert visit[n] == pytest.approx(visit[nd.left] + visit[nd.right], abs=1e-12)
        assert len(stats.router_values[n]) == 30
    for h in stats.class_hist.values():
        assert h.sum() == pytest.approx(1.0, abs=1e-9) or h.sum() == 0


def test_prune_rarely_visited():
    m = _fixed_two_leaf(1 - 1e-7, 0, 2)
    d = Dataset(np.zeros((5, 2)), np.zeros(5, dtype=int), m.task)
    p = prune_rarely_visited(m, d, 1e-3)
    assert p.num_leaves == 1
    assert evaluate(p, d).error_multi == 0.0
    assert prune_rarely_visited(m, d, 0.0).num_leaves == 2


def test_export_dot_parses_and_annotates():
    m = left_expanded(task=Task.classification(3))
    m = m.copy()
    from antree.tree import deepen_edge

    m = deepen_edge(m, 2, m.specs.transformer, m.specs.solver, 7)
    d = _data(m)
    text = export_dot(m, d)
    graphs = pydot.graph_from_dot_data(text)
    assert len(graphs) == 1
    g = graphs[0]
    nodes = {n.get_name(): n for n in g.get_nodes()}
    for nid in m.nodes:
        assert f"n{nid}" in nodes
        label = nodes[f"n{nid}"].get("label")
        assert "p=" in label and "classes:" in label
    for nid in m.internal_nodes():
        assert nodes[f"n{nid}"].get("fillcolor") == "white"
    for leaf in m.leaves():
        assert nodes[f"n{leaf}"].get("fillcolor") == "gray"
    black = [n for n in nodes.values() if n.get("shape") == "point" and n.get("fillcolor") == "black"]
    assert len(black) == 1
    assert len(g.get_edges()) == sum(len(e) + 1 for e in m.edges.values())
