from pathlib import Path

import numpy as np
import pytest

from antree.autodiff import Tensor
from antree.data import load_idx
from antree.modules import ModuleSpec, router_forward, solver_forward
from antree.tree import GrowthSpecs, Task, deepen_edge, make_root_model, split_leaf

DATA_DIR = Path(__file__).parent / "data"
MNIST_DIR = DATA_DIR / "mnist5k"


def fc_specs(width=4, router="fc1,sigmoid", solver="lc"):
    return GrowthSpecs(
        ModuleSpec.parse("router", router),
        ModuleSpec.parse("transformer", f"fc{width},tanh"),
        ModuleSpec.parse("solver", solver),
    )


def random_tree(seed, depth=3, n_in=5, task=None, max_leaves=16, deepen_prob=0.3):
    """Random FC tree grown by random splits/deepens, depth <= ``depth``."""
    rng = np.random.default_rng(seed)
    task = task or Task.classification(3)
    specs = fc_specs(solver="lc" if task.kind == "classification" else "lr")
    model = make_root_model(task, (n_in,), specs, int(rng.integers(1 << 30)))
    for _ in range(int(rng.integers(1, 3 * depth + 2))):
        leaves = model.leaves()
        leaf = leaves[int(rng.integers(len(leaves)))]
        if rng.random() < deepen_prob:
            model = deepen_edge(model, leaf, specs.transformer, specs.solver, int(rng.integers(1 << 30)))
        elif model.nodes[leaf].depth < depth and model.num_leaves < max_leaves:
            model = split_leaf(model, leaf, specs.router, specs.solver, int(rng.integers(1 << 30)))
    # random router biases so that probabilities are far from 0.5
    for r in model.routers.values():
        r.params["0.bias"] = Tensor(rng.normal(size=1) * 2)
    return model


def left_expanded(task=None, n_in=3, seed=0):
    """Depth-2 tree: root split, then its left child split.  Leaves 3, 4, 2."""
    task = task or Task.classification(2)
    specs = fc_specs(solver="lc" if task.kind == "classification" else "lr")
    m = make_root_model(task, (n_in,), specs, seed, use_transformer=False)
    m = split_leaf(m, 0, specs.router, specs.solver, seed + 1)
    m = split_leaf(m, 1, specs.router, specs.solver, seed + 2)
    return m


def flat_mixture(model, x):
    """Oracle: enumerate leaves, walk each root path independently."""
    total = np.zeros(model.task.dim)
    pis = []
    for leaf in model.leaves():
        h = np.asarray(x, dtype=float)
        pi = 1.0
        path = model.path(leaf)
        for i, n in enumerate(path):
            for t in model.edges[n]:
                h = t.forward(Tensor(h[None])).data[0] if not t.is_identity else h
            if n != leaf:
                r = router_forward(model.routers[n], h)
                pi *= r if model.nodes[n].left == path[i + 1] else 1.0 - r
        pis.append(pi)
        d = solver_forward(model.solvers[leaf], h)
        total += pi * (d.probs if model.task.kind == "classification" else d.mean)
    return total, np.array(pis)


@pytest.fixture(scope="session")
def mnist_train():
    return load_idx(MNIST_DIR / "train-images-idx3-ubyte.gz", MNIST_DIR / "train-labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def mnist_test():
    return load_idx(MNIST_DIR / "test-images-idx3-ubyte.gz", MNIST_DIR / "test-labels-idx1-ubyte.gz")


# acceptance criteria record one line each; printed after the test session
ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
