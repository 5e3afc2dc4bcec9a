"""Adaptive neural tree: topology, mixture evaluation, inference, mutation.

Each edge is keyed by the node it leads *into*; the edge keyed by the root
carries raw inputs into the tree.  Node ids are integers in creation order.
Leaf vectors (``pi`` and friends) list leaves left to right; the growth
frontier instead uses breadth-first order, i.e. ``(depth, id)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .modules import (
    ModuleInstance,
    ModuleSpec,
    PredictiveDistribution,
    build_module,
    router_probability,
)
from .seeding import derive_seed

CLASSIFICATION = "classification"
REGRESSION = "regression"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("task dimension must be >= 1")

    @classmethod
    def classification(cls, num_classes: int) -> "Task":
        return cls(CLASSIFICATION, num_classes)

    @classmethod
    def regression(cls, target_dim: int) -> "Task":
        return cls(REGRESSION, target_dim)


@dataclass(frozen=True)
class GrowthSpecs:
    """Recipes used when the tree grows new modules."""

    router: ModuleSpec
    transformer: ModuleSpec
    solver: ModuleSpec

    @property
    def downsample_freq(self) -> int:
        return self.transformer.downsample_freq


@dataclass
class Node:
    id: int
    parent: int | None
    depth: int
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class AntModel:
    """Topology, module assignment and all parameters of one tree."""

    def __init__(
        self,
        task: Task,
        input_shape: Sequence[int],
        root_transformers: list[ModuleInstance],
        root_solver: ModuleInstance,
        specs: GrowthSpecs | None = None,
    ):
        self.task = task
        self.input_shape = tuple(int(s) for s in input_shape)
        self.root = 0
        self.nodes: dict[int, Node] = {0: Node(0, None, 0)}
        self.edges: dict[int, list[ModuleInstance]] = {0: list(root_transformers)}
        self.routers: dict[int, ModuleInstance] = {}
        self.solvers: dict[int, ModuleInstance] = {0: root_solver}
        self.specs = specs
        self.next_id = 1
        # preprocessing offset subtracted from raw inputs before the tree
        self.input_mean: np.ndarray | None = None
        self.validate()

    # -- structure ---------------------------------------------------------

    def copy(self) -> "AntModel":
        return copy.deepcopy(self)

    def is_leaf(self, node: int) -> bool:
        return self.nodes[node].is_leaf

    def leaves(self) -> list[int]:
        """Leaves in left-to-right order."""
        out = []
        stack = [self.root]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf:
                out.append(n.id)
            else:
                stack.append(n.right)
                stack.append(n.left)
        return out

    def leaves_bfs(self) -> list[int]:
        return sorted((n for n in self.nodes if self.nodes[n].is_leaf), key=self.bfs_key)

    def bfs_key(self, node: int) -> tuple[int, int]:
        return (self.nodes[node].depth, node)

    def internal_nodes(self) -> list[int]:
        return sorted(n for n in self.nodes if not self.nodes[n].is_leaf)

    @property
    def num_leaves(self) -> int:
        return sum(1 for n in self.nodes.values() if n.is_leaf)

    def depth(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def path(self, node: int) -> list[int]:
        """Node ids from the root down to ``node``."""
        out = [node]
        while self.nodes[out[-1]].parent is not None:
            out.append(self.nodes[out[-1]].parent)
        return out[::-1]

    def is_left_of(self, leaf: int, node: int) -> bool:
        """True when ``leaf`` lies in the left subtree of internal ``node``."""
        p = self.path(leaf)
        if node not in p or p[-1] == node:
            return False
        return p[p.index(node) + 1] == self.nodes[node].left

    def subtree(self, node: int) -> list[int]:
        out = []
        stack = [node]
        while stack:
            n = self.nodes[stack.pop()]
            out.append(n.id)
            if not n.is_leaf:
                stack.extend((n.right, n.left))
        return out

    def feature_shape(self, node: int) -> tuple[int, ...]:
        """Per-sample shape of the features at ``node`` (after its edge)."""
        edge = self.edges[node]
        if edge:
            return edge[-1].output_shape
        parent = self.nodes[node].parent
        return self.input_shape if parent is None else self.feature_shape(parent)

    def path_transformer_count(self, node: int) -> int:
        return sum(1 for n in self.path(node) for t in self.edges[n] if not t.is_identity)

    # -- modules -----------------------------------------------------------

    def modules(self) -> Iterator[tuple[str, ModuleInstance]]:
        """All modules with stable ids: ``t<node>.<i>``, ``r<node>``, ``s<node>``."""
        for n in sorted(self.nodes):
            for i, t in enumerate(self.edges[n]):
                yield f"t{n}.{i}", t
            if n in self.routers:
                yield f"r{n}", self.routers[n]
            if n in self.solvers:
                yield f"s{n}", self.solvers[n]

    def module(self, module_id: str) -> ModuleInstance:
        for mid, m in self.modules():
            if mid == module_id:
                return m
        raise KeyError(module_id)

    def parameters(self) -> list[Tensor]:
        return [p for _, m in self.modules() for p in m.params.values()]

    def set_trainable(self, module_ids: set[str] | None) -> None:
        """Flag parameters of ``module_ids`` as trainable (all when None)."""
        for mid, m in self.modules():
            m.set_trainable(module_ids is None or mid in module_ids)

    def validate(self) -> None:
        seen_children = set()
        for n in self.nodes.values():
            if n.id not in self.edges or not self.edges[n.id]:
                raise TopologyError(f"node {n.id} has no transformer on its incoming edge")
            if n.is_leaf:
                if n.right is not None:
                    raise TopologyError(f"node {n.id} has a single child")
                if n.id not in self.solvers or n.id in self.routers:
                    raise TopologyError(f"leaf {n.id} must hold exactly a solver")
            else:
                if n.right is None:
                    raise TopologyError(f"internal node {n.id} has a single child")
                if n.id not in self.routers or n.id in self.solvers:
                    raise TopologyError(f"internal node {n.id} must hold exactly a router")
                for c in (n.left, n.right):
                    if c in seen_children or self.nodes[c].parent != n.id:
                        raise TopologyError(f"node {c} has inconsistent parent links")
                    seen_children.add(c)
        if self.nodes[self.root].parent is not None:
            raise TopologyError("root has a parent")
        if len(self.subtree(self.root)) != len(self.nodes):
            raise TopologyError("tree is not connected")
        for n in self.nodes:
            shape = self.input_shape if n == self.root else self.feature_shape(self.nodes[n].parent)
            for t in self.edges[n]:
                if t.input_shape != shape:
                    raise TopologyError(f"transformer on edge {n} expects {t.input_shape}, gets {shape}")
                shape = t.output_shape
            m = self.routers.get(n) or self.solvers.get(n)
            if m.input_shape != shape:
                raise TopologyError(f"module at node {n} expects {m.input_shape}, gets {shape}")


def identity_transformer(shape: Sequence[int]) -> ModuleInstance:
    return build_module(ModuleSpec.identity(), shape, 0)


def make_root_model(
    task: Task,
    input_shape: Sequence[int],
    specs: GrowthSpecs,
    rng_seed: int,
    use_transformer: bool = True,
) -> AntModel:
    """Single-node tree: one transformer on the root edge and one solver."""
    shape = tuple(input_shape)
    if use_transformer and not specs.transformer.is_identity:
        tspec = specs.transformer
        if _wants_pool(tspec.downsample_freq, 1, tspec, shape):
            tspec = tspec.with_pool()
        t = build_module(tspec, shape, derive_seed(rng_seed, "root", "transformer"))
    else:
        t = identity_transformer(shape)
    s = build_module(specs.solver, t.output_shape, derive_seed(rng_seed, "root", "solver"), task.dim)
    return AntModel(task, shape, [t], s, specs)


def _wants_pool(d: int, count: int, spec: ModuleSpec, in_shape: tuple[int, ...]) -> bool:
    if d <= 0 or count % d != 0:
        return False
    probe = build_module(spec, in_shape, 0)
    out = probe.output_shape
    return len(out) == 3 and out[1] > 2 and out[2] > 2


# ---------------------------------------------------------------------------
# mixture evaluation


@dataclass
class LeafTerm:
    leaf: int
    pi: Tensor  # [B]
    log_pi: Tensor  # [B]
    out: Tensor  # [B,K]: log-probabilities or regression means


@dataclass
class MixtureEval:
    terms: list[LeafTerm]
    router_probs: dict[int, Tensor] = field(default_factory=dict)
    features: dict[int, Tensor] = field(default_factory=dict)


RouterOverrides = Mapping[int, "float | np.ndarray"]


def run_edge(model: AntModel, node: int, h: Tensor, start: int = 0) -> Tensor:
    for t in model.edges[node][start:]:
        if not t.is_identity:
            h = t.forward(h)
    return h


def evaluate_subtree(
    model: AntModel,
    node: int,
    h: Tensor,
    *,
    edge_start: int = 0,
    overrides: RouterOverrides | None = None,
    keep_features: bool = False,
) -> MixtureEval:
    """Mixture terms of the subtree at ``node`` relative to reaching ``node``.

    ``h`` is the batch entering the edge into ``node`` after ``edge_start``
    of its transformers.  Works under a :class:`Tape`.
    """
    b = h.shape[0]
    result = MixtureEval([])
    one, zero = Tensor._wrap(np.ones(b)), Tensor._wrap(np.zeros(b))
    _descend(model, node, run_edge(model, node, h, edge_start), one, zero, overrides or {}, keep_features, result)
    return result


def _descend(model, node, h, pi, log_pi, overrides, keep, result: MixtureEval):
    if keep:
        result.features[node] = h
    n = model.nodes[node]
    if n.is_leaf:
        result.terms.append(LeafTerm(node, pi, log_pi, model.solvers[node].forward(h)))
        return
    if node in overrides:
        r = Tensor._wrap(np.broadcast_to(np.asarray(overrides[node], dtype=np.float64), (h.shape[0],)).copy())
    else:
        r = router_probability(model.routers[node], h)
    result.router_probs[node] = r
    not_r = ops.rsub(1.0, r)
    for child, w in ((n.left, r), (n.right, not_r)):
        hc = run_edge(model, child, h)
        _descend(model, child, hc, ops.mul(pi, w), ops.add(log_pi, ops.log(w)), overrides, keep, result)


def _prepare(model: AntModel, X) -> Tensor:
    arr = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if tuple(arr.shape[1:]) != model.input_shape:
        raise ShapeError(f"model expects inputs of shape {model.input_shape}, got {tuple(arr.shape[1:])}")
    if model.input_mean is not None:
        arr = arr - model.input_mean
    return Tensor._wrap(arr)


def _single(model: AntModel, x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if tuple(arr.shape) != model.input_shape:
        raise ShapeError(f"model expects an input of shape {model.input_shape}, got {tuple(arr.shape)}")
    return arr[None]


def evaluate_mixture(model: AntModel, X, overrides: RouterOverrides | None = None, keep_features=False) -> MixtureEval:
    return evaluate_subtree(model, model.root, _prepare(model, X), overrides=overrides, keep_features=keep_features)


def leaf_distribution(task: Task, out: np.ndarray) -> np.ndarray:
    return np.exp(out) if task.kind == CLASSIFICATION else out


@dataclass
class LeafAssignment:
    leaves: list[int]
    pi: np.ndarray
    features: dict[int, np.ndarray]
    decisions: dict[int, float]


def leaf_assignment(model: AntModel, x, overrides: RouterOverrides | None = None) -> LeafAssignment:
    ev = evaluate_mixture(model, _single(model, x), overrides, keep_features=True)
    order = {leaf: i for i, leaf in enumerate(model.leaves())}
    terms = sorted(ev.terms, key=lambda t: order[t.leaf])
    return LeafAssignment(
        leaves=[t.leaf for t in terms],
        pi=np.array([t.pi.data[0] for t in terms]),
        features={n: f.data[0] for n, f in ev.features.items()},
        decisions={n: float(r.data[0]) for n, r in ev.router_probs.items()},
    )


def predict_multi_path_batch(model: AntModel, X, overrides: RouterOverrides | None = None) -> np.ndarray:
    ev = evaluate_mixture(model, X, overrides)
    total = None
    for t in ev.terms:
        contrib = t.pi.data[:, None] * leaf_distribution(model.task, t.out.data)
        total = contrib if total is None else total + contrib
    return total


def predict_multi_path(model: AntModel, x, overrides: RouterOverrides | None = None) -> PredictiveDistribution:
    return PredictiveDistribution(model.task.kind, predict_multi_path_batch(model, _single(model, x), overrides)[0])


def predict_single_path_batch(
    model: AntModel, X, overrides: RouterOverrides | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy routing (left iff r >= 0.5); returns predictions and leaf ids.

    Only the modules on each sample's chosen path are evaluated.
    """
    h = _prepare(model, X)
    n = h.shape[0]
    preds = np.empty((n, model.task.dim))
    leaves = np.empty(n, dtype=np.int64)
    overrides = overrides or {}

    def go(node, idx, h):
        h = run_edge(model, node, h)
        nd = model.nodes[node]
        if nd.is_leaf:
            preds[idx] = leaf_distribution(model.task, model.solvers[node].forward(h).data)
            leaves[idx] = node
            return
        if node in overrides:
            r = np.broadcast_to(np.asarray(overrides[node], dtype=np.float64), (len(idx),))
        else:
            r = router_probability(model.routers[node], h).data
        left = r >= 0.5
        if left.any():
            go(nd.left, idx[left], Tensor._wrap(h.data[left]))
        if (~left).any():
            go(nd.right, idx[~left], Tensor._wrap(h.data[~left]))

    go(model.root, np.arange(n), h)
    return preds, leaves


def predict_single_path(
    model: AntModel, x, overrides: RouterOverrides | None = None
) -> tuple[PredictiveDistribution, int, list[int]]:
    preds, leaves = predict_single_path_batch(model, _single(model, x), overrides)
    leaf = int(leaves[0])
    return PredictiveDistribution(model.task.kind, preds[0]), leaf, model.path(leaf)


def router_outputs(model: AntModel, x) -> dict[int, float]:
    ev = evaluate_mixture(model, _single(model, x))
    return {n: float(r.data[0]) for n, r in ev.router_probs.items()}


def sample_routes(model: AntModel, x, n: int, rng_seed: int) -> np.ndarray:
    """Leaf ids of ``n`` stochastic traversals of a single input.

    At each internal node the left child is taken with probability equal to
    the router output.  Deterministic for a given seed.
    """
    probs = router_outputs(model, x)
    rng = np.random.default_rng(rng_seed)
    node = np.full(n, model.root, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        for nid in np.unique(node[active]):
            sel = active & (node == nid)
            nd = model.nodes[int(nid)]
            if nd.is_leaf:
                active[sel] = False
                continue
            go_left = rng.random(int(sel.sum())) < probs[int(nid)]
            node[np.flatnonzero(sel)] = np.where(go_left, nd.left, nd.right)
    return node


def sample_route(model: AntModel, x, rng_seed: int) -> int:
    return int(sample_routes(model, x, 1, rng_seed)[0])


# ---------------------------------------------------------------------------
# mutations (all return new models; the input model is left untouched)


def split_leaf(
    model: AntModel,
    leaf: int,
    router_spec: ModuleSpec,
    solver_spec: ModuleSpec,
    rng_seed: int,
) -> AntModel:
    if leaf not in model.nodes or not model.is_leaf(leaf):
        raise TopologyError(f"split_leaf: node {leaf} is not a leaf")
    new = model.copy()
    shape = new.feature_shape(leaf)
    left, right = new.next_id, new.next_id + 1
    new.next_id += 2
    depth = new.nodes[leaf].depth + 1
    new.nodes[leaf].left, new.nodes[leaf].right = left, right
    new.nodes[left] = Node(left, leaf, depth)
    new.nodes[right] = Node(right, leaf, depth)
    del new.solvers[leaf]
    new.routers[leaf] = build_module(router_spec, shape, derive_seed(rng_seed, "router"))
    for child, tag in ((left, "left"), (right, "right")):
        new.edges[child] = [identity_transformer(shape)]
        new.solvers[child] = build_module(solver_spec, shape, derive_seed(rng_seed, tag), new.task.dim)
    new.validate()
    return new


def deepen_edge(
    model: AntModel,
    leaf: int,
    transformer_spec: ModuleSpec,
    solver_spec: ModuleSpec,
    rng_seed: int,
) -> AntModel:
    """Append a transformer to the leaf's incoming edge and replace its solver.

    A 2x2 max-pool is folded into the new transformer whenever the count of
    non-identity transformers on the root path reaches a multiple of the
    downsample frequency, unless a spatial extent would drop to 2 or less
    before pooling.
    """
    if leaf not in model.nodes or not model.is_leaf(leaf):
        raise TopologyError(f"deepen_edge: node {leaf} is not a leaf")
    if transformer_spec.is_identity:
        raise TopologyError("deepen_edge: transformer recipe is the identity")
    new = model.copy()
    shape = new.feature_shape(leaf)
    count = new.path_transformer_count(leaf) + 1
    spec = transformer_spec
    if _wants_pool(spec.downsample_freq, count, spec, shape):
        spec = spec.with_pool()
    t = build_module(spec, shape, derive_seed(rng_seed, "transformer"))
    edge = new.edges[leaf]
    if len(edge) == 1 and edge[0].is_identity:
        edge.clear()
    edge.append(t)
    new.solvers[leaf] = build_module(solver_spec, t.output_shape, derive_seed(rng_seed, "solver"), new.task.dim)
    new.validate()
    return new


def prune_leaf(model: AntModel, leaf: int) -> AntModel:
    """Remove ``leaf``; its sibling subtree takes the parent's place.

    The parent's router disappears and the parent's edge transformers are
    prepended to the sibling's edge.
    """
    if not model.is_leaf(leaf):
        raise TopologyError(f"prune_leaf: node {leaf} is not a leaf")
    parent = model.nodes[leaf].parent
    if parent is None:
        raise TopologyError("prune_leaf: cannot remove the only leaf")
    new = model.copy()
    p = new.nodes[parent]
    sib = p.right if p.left == leaf else p.left
    edge = [t for t in new.edges[parent] + new.edges[sib] if not t.is_identity]
    new.edges[sib] = edge or [new.edges[sib][0]]
    grand = p.parent
    new.nodes[sib].parent = grand
    if grand is None:
        new.root = sib
    else:
        g = new.nodes[grand]
        if g.left == parent:
            g.left = sib
        else:
            g.right = sib
    for nid in (leaf, parent):
        del new.nodes[nid]
        new.edges.pop(nid, None)
        new.routers.pop(nid, None)
        new.solvers.pop(nid, None)
    for nid in new.subtree(sib):
        par = new.nodes[nid].parent
        new.nodes[nid].depth = 0 if par is None else new.nodes[par].depth + 1
    new.validate()
    return new


# ---------------------------------------------------------------------------
# accounting

MULTI_PATH = "multi"
SINGLE_PATH = "single"


def _path_cost(model: AntModel, leaf: int, cost) -> float:
    total = 0
    p = model.path(leaf)
    for n in p:
        total += sum(cost(t) for t in model.edges[n])
        if n in model.routers:
            total += cost(model.routers[n])
    return total + cost(model.solvers[leaf])


def _count(model: AntModel, mode: str, data, cost) -> float:
    if mode == MULTI_PATH:
        return sum(cost(m) for _, m in model.modules())
    if mode != SINGLE_PATH:
        raise ValueError(f"unknown counting mode {mode!r}")
    X = data.inputs if hasattr(data, "inputs") else data
    if X is None or len(X) == 0:
        raise ValueError("single-path accounting needs a non-empty dataset")
    _, leaves = predict_single_path_batch(model, X)
    ids, counts = np.unique(leaves, return_counts=True)
    return float(sum(c * _path_cost(model, int(l), cost) for l, c in zip(ids, counts)) / len(leaves))


def count_params(model: AntModel, mode: str = MULTI_PATH, data=None) -> float:
    """Total parameters (multi) or the dataset average along greedy paths (single)."""
    return _count(model, mode, data, lambda m: m.param_count)


def count_flops(model: AntModel, mode: str = MULTI_PATH, data=None) -> float:
    return _count(model, mode, data, lambda m: m.flops())


def path_param_count(model: AntModel, leaf: int) -> int:
    return int(_path_cost(model, leaf, lambda m: m.param_count))


def num_routers_on_path(model: AntModel, leaf: int) -> int:
    return sum(1 for n in model.path(leaf) if n in model.routers)


def leaf_order(model: AntModel) -> dict[int, int]:
    return {leaf: i for i, leaf in enumerate(model.leaves())}


def model_summary(model: AntModel) -> str:
    lines = [
        f"task: {model.task.kind} ({model.task.dim})",
        f"input shape: {list(model.input_shape)}",
        f"leaves: {model.num_leaves}",
        f"depth: {model.depth()}",
    ]
    for mid, m in model.modules():
        lines.append(f"  {mid:<10} {m.kind:<11} {m.spec.recipe:<40} params={m.param_count} flops={m.flops()}")
    lines.append(f"total params (multi-path): {count_params(model)}")
    lines.append(f"total flops (multi-path): {count_flops(model)}")
    return "\n".join(lines)


__all__ = [
    "AntModel",
    "GrowthSpecs",
    "LeafAssignment",
    "Node",
    "Task",
    "TopologyError",
    "count_flops",
    "count_params",
    "deepen_edge",
    "evaluate_mixture",
    "evaluate_subtree",
    "leaf_assignment",
    "make_root_model",
    "predict_multi_path",
    "predict_multi_path_batch",
    "predict_single_path",
    "predict_single_path_batch",
    "prune_leaf",
    "sample_route",
    "sample_routes",
    "split_leaf",
]

