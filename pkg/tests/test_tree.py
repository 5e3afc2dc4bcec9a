import numpy as np
import pytest
from conftest import fc_specs, flat_mixture, left_expanded, random_tree
from hypothesis import given, settings
from hypothesis import strategies as st

from antree.autodiff import ShapeError, Tensor
from antree.modules import ModuleSpec, solver_forward
from antree.tree import (
    MULTI_PATH,
    SINGLE_PATH,
    GrowthSpecs,
    Task,
    TopologyError,
    count_flops,
    count_params,
    deepen_edge,
    leaf_assignment,
    make_root_model,
    predict_multi_path,
    predict_multi_path_batch,
    predict_single_path,
    predict_single_path_batch,
    prune_leaf,
    sample_route,
    sample_routes,
    split_leaf,
)

SARCOS_SPECS = GrowthSpecs(
    ModuleSpec.parse("router", "fc1,sigmoid"),
    ModuleSpec.parse("transformer", "fc256,tanh", 0),
    ModuleSpec.parse("solver", "lr"),
)


def _all_params(model):
    return {(mid, n): p.data.tobytes() for mid, m in model.modules() for n, p in m.params.items()}


# --- leaf assignment --------------------------------------------------------


def test_single_leaf_pi_is_one():
    m = make_root_model(Task.classification(3), (4,), fc_specs(), 0)
    la = leaf_assignment(m, np.ones(4))
    assert la.leaves == [0] and la.pi.tolist() == [1.0]


def test_depth_one_pi():
    m1 = make_root_model(Task.classification(2), (3,), fc_specs(), 0)
    m1 = split_leaf(m1, 0, m1.specs.router, m1.specs.solver, 1)
    la = leaf_assignment(m1, np.ones(3), overrides={0: 0.7})
    np.testing.assert_allclose(la.pi, [0.7, 0.3], rtol=0, atol=1e-15)


def test_depth_two_left_expanded_pi():
    m = left_expanded()
    la = leaf_assignment(m, np.ones(3), overrides={0: 0.7, 1: 0.4})
    assert la.leaves == [3, 4, 2]
    np.testing.assert_allclose(la.pi, [0.28, 0.42, 0.30], rtol=0, atol=1e-15)
    assert set(la.features) == {0, 1, 2, 3, 4}
    assert la.decisions == {0: 0.7, 1: 0.4}


def test_leaf_assignment_rejects_bad_shape():
    with pytest.raises(ShapeError):
        leaf_assignment(left_expanded(), np.ones(4))


# --- mixture oracle ---------------------------------------------------------


def test_single_leaf_multi_path_is_solver_output():
    m = make_root_model(Task.classification(3), (4,), fc_specs(), 2)
    x = np.arange(4.0)
    h = m.edges[0][0].forward(Tensor(x[None])).data[0]
    np.testing.assert_array_equal(predict_multi_path(m, x).probs, solver_forward(m.solvers[0], h).probs)


def test_two_leaf_even_mixture():
    m = make_root_model(Task.classification(2), (2,), fc_specs(), 0, use_transformer=False)
    m = split_leaf(m, 0, m.specs.router, m.specs.solver, 1)
    for leaf, bias in ((1, [50.0, -50.0]), (2, [-50.0, 50.0])):
        m.solvers[leaf].params["0.weight"] = Tensor(np.zeros((2, 2)))
        m.solvers[leaf].params["0.bias"] = Tensor(np.array(bias))
    out = predict_multi_path(m, np.ones(2), overrides={0: 0.5}).probs
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_recursive_matches_flat_enumeration(seed):
    task = Task.classification(3) if seed % 2 else Task.regression(2)
    m = random_tree(seed, depth=4, task=task)
    x = np.random.default_rng(seed).normal(size=5)
    flat, pis = flat_mixture(m, x)
    np.testing.assert_allclose(predict_multi_path(m, x).values, flat, rtol=0, atol=1e-12)
    np.testing.assert_allclose(leaf_assignment(m, x).pi, pis, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pi_normalized_on_random_trees(seed):
    m = random_tree(seed, depth=6)
    X = np.random.default_rng(seed).normal(size=(50, 5)) * 3
    ev_pi = np.stack([leaf_assignment(m, x).pi for x in X[:5]])
    assert np.all(np.abs(ev_pi.sum(axis=1) - 1) < 1e-9)
    assert np.all((ev_pi >= 0) & (ev_pi <= 1))
    probs = predict_multi_path_batch(m, X)
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_polarized_routers_single_equals_multi(seed):
    m = random_tree(seed, depth=5)
    rng = np.random.default_rng(seed)
    overrides = {n: float(rng.integers(2)) for n in m.internal_nodes()}
    X = rng.normal(size=(8, 5))
    multi = predict_multi_path_batch(m, X, overrides)
    single, _ = predict_single_path_batch(m, X, overrides)
    assert np.array_equal(multi, single)


# --- single path ------------------------------------------------------------


def test_single_path_greedy_route():
    m = left_expanded()
    dist, leaf, path = predict_single_path(m, np.ones(3), overrides={0: 0.7, 1: 0.4})
    assert leaf == 4 and path == [0, 1, 4]


def test_single_path_tie_goes_left():
    m = left_expanded()
    _, leaf, _ = predict_single_path(m, np.ones(3), overrides={0: 0.5, 1: 0.5})
    assert leaf == 3


def test_single_leaf_single_path():
    m = make_root_model(Task.regression(2), (3,), fc_specs(solver="lr"), 0)
    _, leaf, path = predict_single_path(m, np.ones(3))
    assert leaf == 0 and path == [0]


def test_single_path_batch_matches_per_sample():
    m = random_tree(4, depth=4)
    X = np.random.default_rng(0).normal(size=(20, 5))
    preds, leaves = predict_single_path_batch(m, X)
    for i, x in enumerate(X):
        d, leaf, _ = predict_single_path(m, x)
        assert leaf == leaves[i]
        np.testing.assert_allclose(d.probs, preds[i], rtol=0, atol=1e-14)


def test_single_path_only_evaluates_chosen_path():
    m = left_expanded()
    calls = []
    for n, s in m.solvers.items():
        orig = s.forward
        s.forward = lambda h, n=n, orig=orig: (calls.append(n), orig(h))[1]
    predict_single_path(m, np.ones(3), overrides={0: 0.0})
    assert calls == [2]


# --- stochastic routing -----------------------------------------------------


def test_sample_route_clamped_router_goes_left():
    m = make_root_model(Task.classification(2), (2,), fc_specs(), 0, use_transformer=False)
    m = split_leaf(m, 0, m.specs.router, m.specs.solver, 1)
    m.routers[0].params["0.bias"] = Tensor(np.array([1e4]))
    leaves = sample_routes(m, np.zeros(2), 1_000_000, 5)
    assert np.mean(leaves == 1) >= 1 - 1e-6


def _set_router_outputs(m, values):
    """Make FC routers constant: zero weights, bias = logit(value)."""
    for n, v in values.items():
        r = m.routers[n]
        r.params["0.weight"] = Tensor(np.zeros_like(r.params["0.weight"].data))
        r.params["0.bias"] = Tensor(np.array([np.log(v / (1 - v))]))


def test_sample_route_frequencies_match_pi():
    m = left_expanded()
    _set_router_outputs(m, {0: 0.7, 1: 0.4})
    leaves = sample_routes(m, np.ones(3), 100_000, 11)
    freq = np.array([np.mean(leaves == leaf) for leaf in (3, 4, 2)])
    assert np.all(np.abs(freq - [0.28, 0.42, 0.30]) <= 0.01)
    # chi-square goodness of fit, 2 degrees of freedom, alpha = 0.01 -> 9.21
    expected = np.array([0.28, 0.42, 0.30]) * len(leaves)
    chi2 = np.sum((freq * len(leaves) - expected) ** 2 / expected)
    assert chi2 < 9.21


def test_sample_route_deterministic():
    m = random_tree(3, depth=4)
    x = np.ones(5)
    assert sample_route(m, x, 42) == sample_route(m, x, 42)


# --- mutations -------------------------------------------------------------


def test_split_leaf_properties():
    m = make_root_model(Task.classification(3), (4,), fc_specs(), 0)
    before = _all_params(m)
    m2 = split_leaf(m, 0, m.specs.router, m.specs.solver, 9)
    assert m.num_leaves == 1 and m2.num_leaves == 2
    assert 0 in m2.routers and 0 not in m2.solvers
    n = m2.nodes[0]
    for c in (n.left, n.right):
        assert len(m2.edges[c]) == 1 and m2.edges[c][0].is_identity
        assert c in m2.solvers
    after = _all_params(m2)
    for key, val in before.items():
        if key[0] != "s0":
            assert after[key] == val


def test_split_new_router_near_half():
    m = make_root_model(Task.classification(3), (4,), fc_specs(), 0)
    m2 = split_leaf(m, 0, m.specs.router, m.specs.solver, 9)
    x = np.random.default_rng(0).normal(size=4) * 0.1
    pi = leaf_assignment(m2, x).pi
    assert abs(pi[0] - pi[1]) < 0.2


def test_split_rejects_internal_node():
    m = left_expanded()
    with pytest.raises(TopologyError):
        split_leaf(m, 1, m.specs.router, m.specs.solver, 0)
    with pytest.raises(TopologyError):
        deepen_edge(m, 0, m.specs.transformer, m.specs.solver, 0)


def test_deepen_sarcos_solver_input():
    m = make_root_model(Task.regression(7), (21,), SARCOS_SPECS, 0, use_transformer=False)
    m2 = deepen_edge(m, 0, SARCOS_SPECS.transformer, SARCOS_SPECS.solver, 1)
    assert m2.solvers[0].input_shape == (256,)
    assert len(m2.edges[0]) == 1 and not m2.edges[0][0].is_identity
    assert m2.num_leaves == 1


def test_deepen_pooling_frequency():
    specs = GrowthSpecs(
        ModuleSpec.parse("router", "conv3-2,relu,gap,fc1,sigmoid"),
        ModuleSpec.parse("transformer", "conv3-2,relu", 2),
        ModuleSpec.parse("solver", "lc"),
    )
    m = make_root_model(Task.classification(3), (1, 8, 8), specs, 0, use_transformer=False)
    m = deepen_edge(m, 0, specs.transformer, specs.solver, 1)
    m = deepen_edge(m, 0, specs.transformer, specs.solver, 2)
    pools = sum(t.spec.layers.count("maxpool") for t in m.edges[0])
    assert pools == 1
    assert m.feature_shape(0) == (2, 4, 4)


def test_deepen_skips_pool_at_small_extent():
    specs = GrowthSpecs(
        ModuleSpec.parse("router", "gap,fc1,sigmoid"),
        ModuleSpec.parse("transformer", "conv3-2,relu", 1),
        ModuleSpec.parse("solver", "lc"),
    )
    m = make_root_model(Task.classification(3), (1, 4, 4), specs, 0, use_transformer=False)
    m = deepen_edge(m, 0, specs.transformer, specs.solver, 1)
    assert m.feature_shape(0) == (2, 2, 2)
    m = deepen_edge(m, 0, specs.transformer, specs.solver, 2)
    assert m.feature_shape(0) == (2, 2, 2)


def test_deepen_zero_frequency_never_pools():
    specs = GrowthSpecs(
        ModuleSpec.parse("router", "gap,fc1,sigmoid"),
        ModuleSpec.parse("transformer", "conv3-2,relu", 0),
        ModuleSpec.parse("solver", "lc"),
    )
    m = make_root_model(Task.classification(3), (1, 8, 8), specs, 0)
    for s in range(3):
        m = deepen_edge(m, 0, specs.transformer, specs.solver, s)
    assert m.feature_shape(0) == (2, 8, 8)


def test_deepen_leaves_pi_and_other_params_unchanged():
    m = random_tree(8, depth=3)
    leaf = m.leaves()[0]
    before = _all_params(m)
    m2 = deepen_edge(m, leaf, m.specs.transformer, m.specs.solver, 3)
    x = np.random.default_rng(1).normal(size=5)
    if leaf == m.root:
        pytest.skip("root leaf: no routers")
    np.testing.assert_array_equal(leaf_assignment(m, x).pi, leaf_assignment(m2, x).pi)
    after = _all_params(m2)
    for key, val in before.items():
        if key[0] != f"s{leaf}":
            assert after[key] == val


def test_prune_leaf_promotes_sibling():
    m = left_expanded()
    p = prune_leaf(m, 3)
    assert p.num_leaves == 2
    assert p.nodes[0].left == 4 and p.nodes[4].depth == 1
    x = np.ones(3)
    # with the pruned subtree's router at 0 (all mass right) both models agree
    np.testing.assert_allclose(
        predict_multi_path(m, x, {0: 0.6, 1: 1e-300}).probs, predict_multi_path(p, x, {0: 0.6}).probs, atol=1e-15
    )
    with pytest.raises(TopologyError):
        prune_leaf(make_root_model(Task.classification(2), (3,), fc_specs(), 0), 0)


# --- accounting -------------------------------------------------------------


def test_sarcos_single_leaf_params():
    m = make_root_model(Task.regression(7), (21,), SARCOS_SPECS, 0, use_transformer=False)
    X = np.zeros((3, 21))
    assert count_params(m) == 154
    assert count_params(m, SINGLE_PATH, X) == 154


def test_two_leaf_hand_count():
    m = make_root_model(Task.regression(7), (21,), SARCOS_SPECS, 0)
    m = split_leaf(m, 0, SARCOS_SPECS.router, SARCOS_SPECS.solver, 1)
    transformer = 21 * 256 + 256
    router = 256 + 1
    solver = 256 * 7 + 7
    assert count_params(m, MULTI_PATH) == transformer + router + 2 * solver
    t_flops = 2 * 21 * 256 + 256 + 256
    r_flops = 2 * 256 + 1 + 1
    s_flops = 2 * 256 * 7 + 7
    assert count_flops(m, MULTI_PATH) == t_flops + r_flops + 2 * s_flops
    X = np.random.default_rng(0).normal(size=(10, 21))
    assert count_params(m, SINGLE_PATH, X) == transformer + router + solver
    assert count_flops(m, SINGLE_PATH, X) == t_flops + r_flops + s_flops


def test_single_leaf_flops_equal_module_sum():
    m = make_root_model(Task.regression(7), (21,), SARCOS_SPECS, 0)
    assert count_flops(m) == m.edges[0][0].flops() + m.solvers[0].flops()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_single_path_never_exceeds_multi_path(seed):
    m = random_tree(seed, depth=4)
    X = np.random.default_rng(seed).normal(size=(30, 5))
    assert count_params(m, SINGLE_PATH, X) <= count_params(m, MULTI_PATH)
    assert count_flops(m, SINGLE_PATH, X) <= count_flops(m, MULTI_PATH)


def test_single_path_needs_data():
    m = make_root_model(Task.regression(7), (21,), SARCOS_SPECS, 0)
    with pytest.raises(ValueError):
        count_params(m, SINGLE_PATH, np.zeros((0, 21)))
    with pytest.raises(ValueError):
        count_params(m, SINGLE_PATH)


def test_topology_invariants_on_random_trees():
    for seed in range(20):
        m = random_tree(seed, depth=5)
        m.validate()
        assert m.num_leaves == len(m.internal_nodes()) + 1
        assert sorted(m.leaves()) == sorted(m.leaves_bfs())
        for n in m.nodes:
            assert len(m.edges[n]) >= 1


def test_input_mean_applied():
    m = make_root_model(Task.regression(1), (2,), fc_specs(solver="lr"), 0)
    x = np.array([1.0, 3.0])
    base = predict_multi_path(m, x - 2.0).mean
    m.input_mean = np.array(2.0)
    np.testing.assert_array_equal(predict_multi_path(m, x).mean, base)
