"""Objective, optimizer, local/global training, growth and ensembles.

Training always optimises the exact marginal likelihood of the mixture.  Local
training exploits the fact that, with everything outside a subtree frozen,
the per-sample likelihood splits into a constant part from the frozen leaves
and a part flowing through the subtree; both the frozen features entering
the subtree and the constant part are computed once per dataset.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, backward, ops
from .data import Dataset, augment, fit_mean, split_train_val
from .tree import (
    CLASSIFICATION,
    AntModel,
    GrowthSpecs,
    Task,
    _prepare,
    deepen_edge,
    evaluate_mixture,
    evaluate_subtree,
    make_root_model,
    predict_multi_path_batch,
    run_edge,
    split_leaf,
)
from .modules import router_probability
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

SPLIT = "SplitData"
DEEPEN = "DeepenTransform"
KEEP = "Keep"

DEFAULT = "default"
NO_ROUTER = "no_router"
NO_TRANSFORMER = "no_transformer"
VARIANTS = (DEFAULT, NO_ROUTER, NO_TRANSFORMER)

# feature caches larger than this are recomputed per minibatch instead
CACHE_LIMIT_BYTES = 1_000_000_000

LogFn = Callable[[dict], None]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 512
    patience: int = 5
    refine_epochs: int = 100
    lr_decay_every: int = 50
    lr_decay_factor: float = 10.0
    rng_seed: int = 0
    max_depth: int | None = 10
    max_local_epochs: int = 200
    max_steps: int | None = None
    augment: str | None = None
    variant: str = DEFAULT
    val_fraction: float = 0.1
    parallel_candidates: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ValueError("invalid learning-rate decay schedule")
        if self.max_local_epochs < 1:
            raise ValueError("max_local_epochs must be >= 1")


def ablation_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Config with the split (no_router) or deepen (no_transformer) option disabled."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return replace(config, variant=variant)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Refinement learning rate for a 0-based epoch."""
    return config.learning_rate / config.lr_decay_factor ** (epoch // config.lr_decay_every)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(
    params: list[Tensor],
    grads: dict[Tensor, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam step; parameters receive fresh arrays."""
    for p in params:
        if not np.isfinite(grads[p]).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name or '?'}; step rejected")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = grads[p]
        k = id(p)
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new.flags.writeable = False
        p.data = new
    return state


# ---------------------------------------------------------------------------
# objective


def _mixture_loss(task: Task, terms, y: np.ndarray, log_pi_a, pi_a, rest) -> Tensor:
    """Per-batch mean NLL given subtree terms and the frozen remainder.

    ``rest`` is the log-likelihood mass of frozen leaves outside the subtree
    (classification) or their weighted squared error (regression); None when
    the subtree is the whole tree.
    """
    if task.kind == CLASSIFICATION:
        cols = [ops.add(t.log_pi, ops.pick(t.out, y)) for t in terms]
        inner = ops.logsumexp(ops.stack(cols, axis=1), axis=1) if len(cols) > 1 else cols[0]
        if log_pi_a is not None:
            inner = ops.add(inner, log_pi_a)
        if rest is not None:
            inner = ops.logsumexp(ops.stack([inner, Tensor._wrap(rest)], axis=1), axis=1)
        return ops.mul(ops.mean(inner), -1.0)
    total = None
    yt = Tensor._wrap(y)
    for t in terms:
        sq = ops.sum(ops.square(ops.sub(yt, t.out)), axis=1)
        c = ops.mul(t.pi, sq)
        total = c if total is None else ops.add(total, c)
    if pi_a is not None:
        total = ops.mul(total, pi_a)
    if rest is not None:
        total = ops.add(total, rest)
    return ops.mean(total)


def _check_batch(model: AntModel, inputs, targets) -> None:
    if len(inputs) == 0:
        raise ValueError("nll: empty batch")
    if model.task.kind == CLASSIFICATION:
        t = np.asarray(targets)
        if t.min() < 0 or t.max() >= model.task.dim:
            raise ValueError(f"nll: target outside the {model.task.dim} classes")


def nll(model: AntModel, batch, overrides=None) -> Tensor:
    """Mean negative log-likelihood of a batch ``(inputs, targets)``.

    Classification: -mean log sum_l pi_l p_l[y].  Regression: the unit-variance
    Gaussian version without constants, mean sum_l pi_l ||y - mu_l||^2.
    """
    inputs, targets = batch
    _check_batch(model, inputs, targets)
    ev = evaluate_mixture(model, inputs, overrides)
    return _mixture_loss(model.task, ev.terms, np.asarray(targets), None, None, None)


# ---------------------------------------------------------------------------
# frozen-context regions


def _owner(module_id: str) -> tuple[int, int | None]:
    if module_id[0] == "t":
        node, idx = module_id[1:].split(".")
        return int(node), int(idx)
    return int(module_id[1:]), None


def _lca(model: AntModel, nodes: list[int]) -> int:
    paths = [model.path(n) for n in nodes]
    anchor = model.root
    for level in zip(*paths):
        if all(v == level[0] for v in level):
            anchor = level[0]
        else:
            break
    return anchor


def trainable_region(model: AntModel, trainable: set[str]) -> tuple[int, int]:
    """Smallest (node, edge offset) whose subtree holds every trainable module."""
    owners = [_owner(m) for m in trainable]
    anchor = _lca(model, [n for n, _ in owners])
    on_edge = [i for n, i in owners if n == anchor and i is not None]
    start = min(on_edge) if on_edge else len(model.edges[anchor])
    return anchor, start


class _RegionContext:
    """Frozen inputs to a region: features, reach probability, remainder."""

    def __init__(self, model: AntModel, node: int, edge_start: int, data: Dataset, cache: bool):
        self.model = model
        self.node = node
        self.edge_start = edge_start
        self.data = data
        self.whole = node == model.root and edge_start == 0
        self.cached = None
        if cache:
            self.cached = self._compute(data.inputs, data.targets)

    def _compute(self, inputs, targets):
        model, node = self.model, self.node
        x = _prepare(model, inputs)
        if self.whole:
            return x.data, None, None, None
        path = model.path(node)
        h = x
        log_pi = np.zeros(len(inputs))
        pi = np.ones(len(inputs))
        for parent, child in zip(path[:-1], path[1:]):
            h = run_edge(model, parent, h)
            r = router_probability(model.routers[parent], h).data
            w = r if model.nodes[parent].left == child else 1.0 - r
            pi = pi * w
            log_pi = log_pi + np.log(w)
        for t in model.edges[node][: self.edge_start]:
            if not t.is_identity:
                h = t.forward(h)
        feats = h.data
        rest = None
        inside = set(model.subtree(node))
        if len(inside) < len(model.nodes):
            ev = evaluate_mixture(model, inputs)
            outs = [t for t in ev.terms if t.leaf not in inside]
            if model.task.kind == CLASSIFICATION:
                y = np.asarray(targets)
                cols = np.stack([t.log_pi.data + t.out.data[np.arange(len(y)), y] for t in outs], axis=1)
                m = cols.max(axis=1, keepdims=True)
                m = np.where(np.isfinite(m), m, 0.0)
                with np.errstate(divide="ignore"):
                    rest = (m + np.log(np.exp(cols - m).sum(axis=1, keepdims=True)))[:, 0]
            else:
                y = np.asarray(targets)
                rest = sum(t.pi.data * ((y - t.out.data) ** 2).sum(axis=1) for t in outs)
        return feats, log_pi, pi, rest

    def batch(self, idx: np.ndarray, aug_seed: int | None = None, policy: str | None = None):
        if self.cached is not None and policy in (None, "none"):
            feats, log_pi, pi, rest = self.cached
            pick = lambda a: None if a is None else a[idx]  # noqa: E731
            return feats[idx], pick(log_pi), pick(pi), pick(rest), self.data.targets[idx]
        inputs = self.data.inputs[idx]
        if policy not in (None, "none"):
            inputs = augment(inputs, policy, aug_seed)
        feats, log_pi, pi, rest = self._compute(inputs, self.data.targets[idx])
        return feats, log_pi, pi, rest, self.data.targets[idx]

    def loss(self, parts) -> Tensor:
        feats, log_pi, pi, rest, y = parts
        ev = evaluate_subtree(self.model, self.node, Tensor._wrap(feats), edge_start=self.edge_start)
        la = None if log_pi is None else Tensor._wrap(log_pi)
        pa = None if pi is None else Tensor._wrap(pi)
        return _mixture_loss(self.model.task, ev.terms, np.asarray(y), la, pa, rest)

    def mean_loss(self, batch_size: int) -> float:
        n = len(self.data)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = np.arange(s, min(n, s + batch_size))
            total += float(self.loss(self.batch(idx)).data) * len(idx)
        return total / n


def _feature_bytes(model: AntModel, node: int, edge_start: int, n: int) -> int:
    if edge_start == 0:
        par = model.nodes[node].parent
        shape = model.input_shape if par is None else model.feature_shape(par)
    else:
        shape = model.edges[node][edge_start - 1].output_shape
    return 8 * n * math.prod(shape)


def _make_context(model, node, start, data: Dataset, config: TrainConfig, train: bool) -> _RegionContext:
    cache = _feature_bytes(model, node, start, len(data)) <= CACHE_LIMIT_BYTES
    if train and config.augment not in (None, "none"):
        cache = False
    return _RegionContext(model, node, start, data, cache)


def dataset_nll(model: AntModel, data: Dataset, batch_size: int = 512) -> float:
    ctx = _RegionContext(model, model.root, 0, data, cache=False)
    return ctx.mean_loss(batch_size)


# ---------------------------------------------------------------------------
# local training


@dataclass
class LocalResult:
    best_val_nll: float
    params: dict[str, dict[str, np.ndarray]]
    epochs: int
    steps: int
    val_history: list[float]


def _snapshot(model: AntModel, ids: set[str]) -> dict[str, dict[str, np.ndarray]]:
    return {mid: {n: p.data for n, p in m.params.items()} for mid, m in model.modules() if mid in ids}


def _restore(model: AntModel, snap: dict[str, dict[str, np.ndarray]]) -> None:
    for mid, m in model.modules():
        if mid in snap:
            for n, p in m.params.items():
                p.data = snap[mid][n]


def train_local(
    model: AntModel,
    trainable: set[str],
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    log: LogFn | None = None,
    phase: str = "grow",
    tag: tuple = (),
) -> LocalResult:
    """Train only ``trainable`` modules with early stopping on validation NLL.

    The best-validation parameters are restored into ``model`` and returned.
    Training stops once ``patience`` consecutive epochs fail to improve.
    """
    if not trainable:
        raise ValueError("train_local: the trainable set is empty")
    ids = {mid for mid, _ in model.modules()}
    missing = set(trainable) - ids
    if missing:
        raise KeyError(f"train_local: unknown modules {sorted(missing)}")
    model.set_trainable(set(trainable))
    params = [p for mid, m in model.modules() if mid in trainable for p in m.params.values()]
    node, start = trainable_region(model, set(trainable))
    tr_ctx = _make_context(model, node, start, train, config, train=True)
    va_ctx = _make_context(model, node, start, val, config, train=False)
    state = AdamState()
    best, best_snap = math.inf, _snapshot(model, trainable)
    stale = epochs = steps = 0
    history = []
    try:
        while epochs < config.max_local_epochs:
            rng = rng_for(config.rng_seed, phase, *tag, "epoch", epochs)
            perm = rng.permutation(len(train))
            total = 0.0
            for b, s in enumerate(range(0, len(train), config.batch_size)):
                idx = perm[s : s + config.batch_size]
                parts = tr_ctx.batch(idx, derive_seed(config.rng_seed, phase, *tag, "aug", epochs, b), config.augment)
                if params:
                    with Tape() as tape:
                        loss = tr_ctx.loss(parts)
                    if not np.isfinite(loss.data):
                        raise TrainingError("non-finite training loss")
                    grads = backward(tape, loss, params)
                    adam_update(params, grads, state, config.learning_rate, config.adam_betas, config.adam_eps)
                else:
                    loss = tr_ctx.loss(parts)
                total += float(loss.data) * len(idx)
                steps += 1
                if config.max_steps is not None and steps >= config.max_steps:
                    break
            epochs += 1
            val_nll = va_ctx.mean_loss(config.batch_size)
            history.append(val_nll)
            if log:
                log(
                    {
                        "phase": phase,
                        "leaf": tag[0] if tag else None,
                        "candidate": tag[1] if len(tag) > 1 else None,
                        "epoch": epochs,
                        "train_nll": total / len(train),
                        "val_nll": val_nll,
                        "lr": config.learning_rate,
                    }
                )
            if not np.isfinite(val_nll):
                raise TrainingError("non-finite validation NLL")
            if val_nll < best:
                best, best_snap, stale = val_nll, _snapshot(model, trainable), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
            if config.max_steps is not None and steps >= config.max_steps:
                break
    finally:
        model.set_trainable(set())
    _restore(model, best_snap)
    return LocalResult(best, best_snap, epochs, steps, history)


# ---------------------------------------------------------------------------
# growth


def validation_metric(model: AntModel, data: Dataset, batch_size: int = 512) -> float:
    """Multi-path error: classification error in percent, or regression MSE."""
    preds = np.concatenate(
        [predict_multi_path_batch(model, data.inputs[s : s + batch_size]) for s in range(0, len(data), batch_size)]
    )
    if model.task.kind == CLASSIFICATION:
        return float(np.mean(preds.argmax(axis=1) != data.targets) * 100.0)
    return float(np.mean((preds - data.targets) ** 2))


def choose_growth(keep: float, split: float | None, deepen: float | None) -> str:
    """Pick the decision for one leaf from validation NLLs.

    The better candidate wins only if it beats ``keep`` strictly; a tie
    between split and deepen goes to deepen.  Missing or non-finite
    candidates never win.
    """
    cands = []
    if deepen is not None and np.isfinite(deepen):
        cands.append((deepen, 0, DEEPEN))
    if split is not None and np.isfinite(split):
        cands.append((split, 1, SPLIT))
    if not cands:
        return KEEP
    val, _, decision = min(cands)
    return decision if val < keep else KEEP


@dataclass
class GrowthStep:
    leaf: int
    decision: str
    keep_nll: float
    split_nll: float | None
    deepen_nll: float | None

    def to_dict(self) -> dict:
        return {
            "leaf": self.leaf,
            "decision": self.decision,
            "keep_val_nll": self.keep_nll,
            "split_val_nll": self.split_nll,
            "deepen_val_nll": self.deepen_nll,
        }


@dataclass
class GrowthState:
    frontier: list[int]
    best_val_nll: float
    history: list[GrowthStep] = field(default_factory=list)
    optimal: set[int] = field(default_factory=set)

    def accepted_nlls(self) -> list[float]:
        out = []
        for s in self.history:
            if s.decision == SPLIT:
                out.append(s.split_nll)
            elif s.decision == DEEPEN:
                out.append(s.deepen_nll)
        return out


@dataclass
class GrowthResult:
    model: AntModel
    state: GrowthState
    best_model: AntModel
    best_metric: float


def init_root(
    task: Task,
    input_shape,
    specs: GrowthSpecs,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    log: LogFn | None = None,
    input_mean: np.ndarray | None = None,
) -> AntModel:
    """Root with one transformer and one solver, trained jointly.

    ``input_mean`` is stored in the model and subtracted from every input.
    """
    model = make_root_model(
        task,
        input_shape,
        specs,
        derive_seed(config.rng_seed, "root"),
        use_transformer=config.variant != NO_TRANSFORMER,
    )
    if input_mean is not None:
        model.input_mean = np.asarray(input_mean, dtype=np.float64)
    trainable = {mid for mid, m in model.modules() if m.param_count}
    train_local(model, trainable, train, val, config, log, phase="root", tag=(model.root, "root"))
    return model


def _candidate(kind, model, leaf, specs, train, val, config, seed):
    records: list[dict] = []
    if kind == SPLIT:
        cand = split_leaf(model, leaf, specs.router, specs.solver, seed)
        n = cand.nodes[leaf]
        trainable = {f"r{leaf}", f"s{n.left}", f"s{n.right}"}
    else:
        cand = deepen_edge(model, leaf, specs.transformer, specs.solver, seed)
        trainable = {f"t{leaf}.{len(cand.edges[leaf]) - 1}", f"s{leaf}"}
    try:
        res = train_local(cand, trainable, train, val, config, records.append, "grow", (leaf, kind))
        score = res.best_val_nll
    except TrainingError as exc:
        logger.warning("candidate %s at leaf %d diverged: %s", kind, leaf, exc)
        score = math.inf
    return cand, score, records


def grow(
    model: AntModel,
    train: Dataset,
    val: Dataset,
    specs: GrowthSpecs,
    config: TrainConfig,
    log: LogFn | None = None,
) -> GrowthResult:
    """Breadth-first growth from a trained root (Keep / SplitData / DeepenTransform).

    Both candidates start from the same frozen model and only their new
    modules are trained.  The lower validation NLL wins if it improves on
    the incumbent; otherwise the leaf is marked optimal.
    """
    model = model.copy()
    best_nll = dataset_nll(model, val, config.batch_size)
    state = GrowthState(frontier=model.leaves_bfs(), best_val_nll=best_nll)
    best_model, best_metric = model.copy(), validation_metric(model, val, config.batch_size)
    allow_split = config.variant != NO_ROUTER
    allow_deepen = config.variant != NO_TRANSFORMER and not specs.transformer.is_identity
    step = 0
    while state.frontier:
        state.frontier.sort(key=model.bfs_key)
        leaf = state.frontier.pop(0)
        kinds = []
        if allow_split and (config.max_depth is None or model.nodes[leaf].depth < config.max_depth):
            kinds.append(SPLIT)
        if allow_deepen and (config.max_depth is None or model.path_transformer_count(leaf) < config.max_depth):
            kinds.append(DEEPEN)
        jobs = [
            (k, model, leaf, specs, train, val, config, derive_seed(config.rng_seed, "grow", step, leaf, k))
            for k in kinds
        ]
        if config.parallel_candidates and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                results = list(pool.map(lambda j: _candidate(*j), jobs))
        else:
            results = [_candidate(*j) for j in jobs]
        scores = {k: (cand, score) for k, (cand, score, _) in zip(kinds, results)}
        if log:
            for _, _, records in results:
                for r in records:
                    log(r)
        split_nll = scores[SPLIT][1] if SPLIT in scores else None
        deepen_nll = scores[DEEPEN][1] if DEEPEN in scores else None
        decision = choose_growth(state.best_val_nll, split_nll, deepen_nll)
        state.history.append(GrowthStep(leaf, decision, state.best_val_nll, split_nll, deepen_nll))
        if log:
            log({"phase": "grow-decision", **state.history[-1].to_dict()})
        if decision == KEEP:
            state.optimal.add(leaf)
        else:
            model, state.best_val_nll = scores[decision]
            if decision == SPLIT:
                n = model.nodes[leaf]
                state.frontier.extend([n.left, n.right])
            else:
                state.frontier.append(leaf)
            metric = validation_metric(model, val, config.batch_size)
            if metric < best_metric:
                best_model, best_metric = model.copy(), metric
        step += 1
    return GrowthResult(model, state, best_model, best_metric)


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefineResult:
    model: AntModel
    best_metric: float
    epochs: int
    from_refinement: bool


def refine(
    model: AntModel,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    incumbent: tuple[AntModel, float] | None = None,
    log: LogFn | None = None,
) -> RefineResult:
    """Joint training of every parameter with step learning-rate decay.

    Returns the model with the best validation metric among ``incumbent``,
    the starting model and every refinement epoch.
    """
    model = model.copy()
    start_metric = validation_metric(model, val, config.batch_size)
    best_model, best_metric, from_ref = model.copy(), start_metric, False
    if incumbent is not None and incumbent[1] < best_metric:
        best_model, best_metric = incumbent[0].copy(), incumbent[1]
    if config.refine_epochs <= 0:
        return RefineResult(best_model, best_metric, 0, False)
    model.set_trainable(None)
    params = [p for p in model.parameters()]
    ctx = _make_context(model, model.root, 0, train, config, train=True)
    state = AdamState()
    steps = 0
    epoch = 0
    try:
        for epoch in range(config.refine_epochs):
            lr = lr_at(epoch, config)
            perm = rng_for(config.rng_seed, "refine", "epoch", epoch).permutation(len(train))
            total = 0.0
            diverged = False
            for b, s in enumerate(range(0, len(train), config.batch_size)):
                idx = perm[s : s + config.batch_size]
                parts = ctx.batch(idx, derive_seed(config.rng_seed, "refine", "aug", epoch, b), config.augment)
                with Tape() as tape:
                    loss = ctx.loss(parts)
                if not np.isfinite(loss.data):
                    diverged = True
                    break
                grads = backward(tape, loss, params)
                try:
                    adam_update(params, grads, state, lr, config.adam_betas, config.adam_eps)
                except TrainingError:
                    diverged = True
                    break
                total += float(loss.data) * len(idx)
                steps += 1
                if config.max_steps is not None and steps >= config.max_steps:
                    break
            if diverged:
                logger.warning("refinement diverged at epoch %d; keeping the last finite snapshot", epoch)
                break
            metric = validation_metric(model, val, config.batch_size)
            if log:
                log(
                    {
                        "phase": "refine",
                        "leaf": None,
                        "candidate": None,
                        "epoch": epoch + 1,
                        "train_nll": total / len(train),
                        "val_nll": dataset_nll(model, val, config.batch_size),
                        "val_metric": metric,
                        "lr": lr,
                    }
                )
            if metric < best_metric:
                best_model, best_metric, from_ref = model.copy(), metric, True
            if config.max_steps is not None and steps >= config.max_steps:
                break
    finally:
        model.set_trainable(set())
    best_model.set_trainable(set())
    return RefineResult(best_model, best_metric, epoch + 1, from_ref)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class FitResult:
    model: AntModel
    growth: GrowthResult
    refinement: RefineResult


def fit(
    task: Task,
    specs: GrowthSpecs,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    log: LogFn | None = None,
    input_mean: np.ndarray | None = None,
) -> FitResult:
    """Root training, growth, then refinement with best-validation selection."""
    root = init_root(task, train.input_shape, specs, train, val, config, log, input_mean)
    g = grow(root, train, val, specs, config, log)
    r = refine(g.model, train, val, config, incumbent=(g.best_model, g.best_metric), log=log)
    return FitResult(r.model, g, r)


def train_ensemble(
    task: Task,
    specs: GrowthSpecs,
    data: Dataset,
    config: TrainConfig,
    k: int,
    log: LogFn | None = None,
    mean_subtract: bool = False,
) -> list[AntModel]:
    """``k`` independent fits; member ``i`` uses seed ``rng_seed + i`` for both
    its train/validation split and its training."""
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    models = []
    for i in range(k):
        cfg = replace(config, rng_seed=config.rng_seed + i)
        train, val = split_train_val(data, cfg.val_fraction, cfg.rng_seed)
        mean = fit_mean(train) if mean_subtract else None
        models.append(fit(task, specs, train, val, cfg, log, mean).model)
    return models
