"""Metrics, diagnostics, ensembles and DOT export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, check_task
from .modules import PredictiveDistribution
from .tree import (
    CLASSIFICATION,
    MULTI_PATH,
    SINGLE_PATH,
    AntModel,
    count_flops,
    count_params,
    evaluate_mixture,
    leaf_distribution,
    predict_multi_path_batch,
    predict_single_path_batch,
    prune_leaf,
)

# leaves visited less often than this are reported as prunable
PRUNE_THRESHOLD = 1e-3
POLARIZATION_BINS = 10


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _error(task_kind: str, preds: np.ndarray, targets: np.ndarray) -> float:
    if task_kind == CLASSIFICATION:
        return float(np.mean(preds.argmax(axis=1) != targets) * 100.0)
    return float(np.mean((preds - targets) ** 2))


@dataclass
class NodeStats:
    visit_prob: np.ndarray  # node id -> mean reach probability, aligned with ``nodes``
    nodes: list[int]
    class_hist: dict[int, np.ndarray]
    router_values: dict[int, np.ndarray]


def node_statistics(model: AntModel, data: Dataset, batch_size: int = 512) -> NodeStats:
    """Mean reach probability and reach-weighted class histogram per node."""
    nodes = sorted(model.nodes)
    reach = {n: 0.0 for n in nodes}
    hist = {n: np.zeros(model.task.dim) for n in nodes}
    routers = {n: [] for n in model.routers}
    classification = model.task.kind == CLASSIFICATION
    for sl in _batches(len(data), batch_size):
        ev = evaluate_mixture(model, data.inputs[sl])
        for n, r in ev.router_probs.items():
            routers[n].append(r.data)
        for t in ev.terms:
            pi = t.pi.data
            for n in model.path(t.leaf):
                reach[n] += float(pi.sum())
                if classification:
                    hist[n] += np.bincount(data.targets[sl], weights=pi, minlength=model.task.dim)
    total = float(len(data))
    return NodeStats(
        visit_prob=np.array([reach[n] / total for n in nodes]),
        nodes=nodes,
        class_hist={n: (h / h.sum() if h.sum() > 0 else h) for n, h in hist.items()},
        router_values={n: np.concatenate(v) if v else np.zeros(0) for n, v in routers.items()},
    )


@dataclass
class MetricsReport:
    task: str
    num_samples: int
    error_multi: float
    error_single: float
    params_multi: float
    params_single: float
    flops_multi: float
    flops_single: float
    num_leaves: int
    leaf_visit_prob: dict[int, float]
    leaf_single_path_freq: dict[int, float]
    router_polarization: list[int]
    prunable_leaves: list[int]
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leaf_visit_prob"] = {str(k): v for k, v in self.leaf_visit_prob.items()}
        d["leaf_single_path_freq"] = {str(k): v for k, v in self.leaf_single_path_freq.items()}
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(model: AntModel, data: Dataset, batch_size: int = 512) -> MetricsReport:
    """Errors, parameter/FLOP counts and routing diagnostics for both inference modes."""
    check_task(data, model.task)
    multi, single, leaves = [], [], []
    for sl in _batches(len(data), batch_size):
        multi.append(predict_multi_path_batch(model, data.inputs[sl]))
        p, lv = predict_single_path_batch(model, data.inputs[sl])
        single.append(p)
        leaves.append(lv)
    multi = np.concatenate(multi)
    single = np.concatenate(single)
    leaves = np.concatenate(leaves)
    stats = node_statistics(model, data, batch_size)
    visit = dict(zip(stats.nodes, stats.visit_prob))
    leaf_visit = {leaf: float(visit[leaf]) for leaf in model.leaves()}
    freq = {leaf: float(np.mean(leaves == leaf)) for leaf in model.leaves()}
    hist = np.zeros(POLARIZATION_BINS, dtype=np.int64)
    for vals in stats.router_values.values():
        hist += np.histogram(vals, bins=POLARIZATION_BINS, range=(0.0, 1.0))[0]
    return MetricsReport(
        task=model.task.kind,
        num_samples=len(data),
        error_multi=_error(model.task.kind, multi, data.targets),
        error_single=_error(model.task.kind, single, data.targets),
        params_multi=float(count_params(model, MULTI_PATH)),
        params_single=float(count_params(model, SINGLE_PATH, data)),
        flops_multi=float(count_flops(model, MULTI_PATH)),
        flops_single=float(count_flops(model, SINGLE_PATH, data)),
        num_leaves=model.num_leaves,
        leaf_visit_prob=leaf_visit,
        leaf_single_path_freq=freq,
        router_polarization=hist.tolist(),
        prunable_leaves=[leaf for leaf, p in leaf_visit.items() if p < PRUNE_THRESHOLD],
    )


def least_likely_path_eval(model: AntModel, data: Dataset, batch_size: int = 512) -> float:
    """Error (%) when predicting with the leaf of smallest reaching probability.

    Ties go to the lowest leaf id.
    """
    check_task(data, model.task)
    if model.task.kind != CLASSIFICATION:
        raise ValueError("least-likely-path diagnostic needs a classification model")
    if model.num_leaves < 2:
        raise ValueError("least-likely-path diagnostic is undefined for a single-leaf tree")
    wrong = 0
    for sl in _batches(len(data), batch_size):
        ev = evaluate_mixture(model, data.inputs[sl])
        terms = sorted(ev.terms, key=lambda t: t.leaf)
        pis = np.stack([t.pi.data for t in terms], axis=1)
        choice = pis.argmin(axis=1)
        outs = np.stack([t.out.data for t in terms], axis=1)
        pred = outs[np.arange(len(choice)), choice].argmax(axis=1)
        wrong += int(np.sum(pred != data.targets[sl]))
    return 100.0 * wrong / len(data)


def sampled_path_eval(model: AntModel, data: Dataset, rng_seed: int, batch_size: int = 512) -> float:
    """Error with one stochastic route per sample (left with probability r)."""
    check_task(data, model.task)
    rng = np.random.default_rng(rng_seed)
    preds = []
    for sl in _batches(len(data), batch_size):
        ev = evaluate_mixture(model, data.inputs[sl])
        outs = {t.leaf: t.out.data for t in ev.terms}
        n = sl.stop - sl.start
        node = np.full(n, model.root)
        for _ in range(model.depth()):
            for nid in model.internal_nodes():
                sel = node == nid
                if sel.any():
                    left = rng.random(int(sel.sum())) < ev.router_probs[nid].data[sel]
                    nd = model.nodes[nid]
                    node[sel] = np.where(left, nd.left, nd.right)
        batch = np.stack([outs[int(leaf)][i] for i, leaf in enumerate(node)])
        preds.append(leaf_distribution(model.task, batch))
    return _error(model.task.kind, np.concatenate(preds), data.targets)


def _check_ensemble(models: Sequence[AntModel]) -> None:
    if not models:
        raise ValueError("ensemble needs at least one model")
    t = models[0].task
    if any(m.task != t for m in models):
        raise ValueError("ensemble members have different tasks")


def ensemble_predict_batch(models: Sequence[AntModel], X, mode: str = MULTI_PATH) -> np.ndarray:
    _check_ensemble(models)
    acc = None
    for m in models:
        p = predict_multi_path_batch(m, X) if mode == MULTI_PATH else predict_single_path_batch(m, X)[0]
        acc = p if acc is None else acc + p
    return acc / len(models)


def ensemble_predict(models: Sequence[AntModel], x, mode: str = MULTI_PATH) -> PredictiveDistribution:
    """Arithmetic mean of member distributions (or regression means)."""
    _check_ensemble(models)
    arr = np.asarray(x, dtype=np.float64)[None]
    return PredictiveDistribution(models[0].task.kind, ensemble_predict_batch(models, arr, mode)[0])


def evaluate_ensemble(models: Sequence[AntModel], data: Dataset, batch_size: int = 512) -> dict:
    _check_ensemble(models)
    check_task(data, models[0].task)
    out = {}
    for mode in (MULTI_PATH, SINGLE_PATH):
        preds = np.concatenate(
            [ensemble_predict_batch(models, data.inputs[sl], mode) for sl in _batches(len(data), batch_size)]
        )
        out[f"error_{mode}"] = _error(models[0].task.kind, preds, data.targets)
    out["members"] = len(models)
    out["params_multi"] = float(sum(count_params(m) for m in models))
    out["params_single"] = float(sum(count_params(m, SINGLE_PATH, data) for m in models))
    return out


def prune_rarely_visited(model: AntModel, data: Dataset, threshold: float) -> AntModel:
    """Drop leaves whose mean reach probability falls below ``threshold``."""
    while model.num_leaves > 1:
        stats = node_statistics(model, data)
        visit = dict(zip(stats.nodes, stats.visit_prob))
        dead = [leaf for leaf in model.leaves() if visit[leaf] < threshold]
        if not dead:
            break
        model = prune_leaf(model, min(dead, key=lambda leaf: visit[leaf]))
    return model


def _fmt_hist(h: np.ndarray) -> str:
    return " ".join(f"{v:.2f}" for v in h)


def export_dot(model: AntModel, data: Dataset, batch_size: int = 512) -> str:
    """Graphviz DOT text of the tree annotated with data statistics.

    Routers are white circles, solvers gray circles, transformers small black
    dots along edges (white when the edge only carries the identity).
    """
    stats = node_statistics(model, data, batch_size)
    visit = dict(zip(stats.nodes, stats.visit_prob))
    classification = model.task.kind == CLASSIFICATION
    lines = [
        "digraph ant {",
        '  graph [rankdir=TB, fontname="Helvetica"];',
        '  node [fontname="Helvetica", fontsize=10];',
        '  input [shape=plaintext, label="x"];',
    ]

    def label(n):
        parts = [f"node {n}", f"p={visit[n]:.4f}"]
        if classification:
            parts.append("classes: " + _fmt_hist(stats.class_hist[n]))
        return "\\n".join(parts)

    for n in sorted(model.nodes):
        if model.is_leaf(n):
            lines.append(f'  n{n} [shape=circle, style=filled, fillcolor=gray, label="{label(n)}"];')
        else:
            lines.append(f'  n{n} [shape=circle, style=filled, fillcolor=white, label="{label(n)}"];')
    for n in sorted(model.nodes):
        parent = model.nodes[n].parent
        src = "input" if parent is None else f"n{parent}"
        for i, t in enumerate(model.edges[n]):
            tid = f"t{n}_{i}"
            color = "white" if t.is_identity else "black"
            lines.append(
                f'  {tid} [shape=point, width=0.12, style=filled, fillcolor={color}, '
                f'tooltip="{t.spec.recipe}"];'
            )
            lines.append(f"  {src} -> {tid};")
            src = tid
        side = ""
        if parent is not None:
            side = ' [label="L"]' if model.nodes[parent].left == n else ' [label="R"]'
        lines.append(f"  {src} -> n{n}{side};")
    lines.append("}")
    return "\n".join(lines) + "\n"
