"""Command-line interface: ``antree train|eval|export|inspect``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or model file
error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, load_config
from .data import (
    MEAN_SUBTRACT,
    DataFormatError,
    Dataset,
    check_task,
    fit_mean,
    load_csv,
    load_idx,
    split_train_val,
)
from .evaluation import (
    evaluate,
    evaluate_ensemble,
    export_dot,
    least_likely_path_eval,
    prune_rarely_visited,
    sampled_path_eval,
)
from .serialization import ModelFormatError, load_model, save_model
from .training import TrainingError, fit
from .tree import CLASSIFICATION, Task, deepen_edge, make_root_model, model_summary, split_leaf

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3

logger = logging.getLogger("antree")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# data


def _load_split(cfg: RunConfig, which: str) -> Dataset:
    d = cfg.data
    try:
        if d.kind == "csv":
            path = d.train_csv if which == "train" else d.test_csv
            if path is None or d.input_cols is None or d.target_cols is None:
                raise CliError(f"[data] needs {which}_csv, input_cols and target_cols", EXIT_USAGE)
            data = load_csv(path, d.input_cols, d.target_cols)
        else:
            images = d.train_images if which == "train" else d.test_images
            labels = d.train_labels if which == "train" else d.test_labels
            if images is None or labels is None:
                raise CliError(f"[data] needs {which}_images and {which}_labels", EXIT_USAGE)
            data = load_idx(images, labels, d.num_classes)
    except (FileNotFoundError, DataFormatError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    limit = d.train_subset if which == "train" else d.test_subset
    if limit is not None:
        data = data.head(limit)
    if d.input_shape and data.input_shape != tuple(d.input_shape):
        raise CliError(
            f"{which} inputs have shape {data.input_shape}, config declares {tuple(d.input_shape)}",
            EXIT_DATA,
        )
    return data


def _load_eval_data(paths: list[str], task: Task, input_shape) -> Dataset:
    try:
        if task.kind == CLASSIFICATION:
            if len(paths) != 2:
                raise CliError("classification data needs --data IMAGES --data LABELS", EXIT_USAGE)
            data = load_idx(paths[0], paths[1], task.dim)
        else:
            if len(paths) != 1:
                raise CliError("regression data needs a single --data CSV", EXIT_USAGE)
            n_in = int(np.prod(input_shape))
            data = load_csv(paths[0], n_in, task.dim)
    except (FileNotFoundError, DataFormatError) as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    if data.input_shape != tuple(input_shape):
        raise CliError(f"data inputs have shape {data.input_shape}, model expects {tuple(input_shape)}", EXIT_DATA)
    try:
        check_task(data, task)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    return data


def _load_models(paths: list[str]):
    models = []
    for p in paths:
        try:
            models.append(load_model(p))
        except FileNotFoundError:
            raise CliError(f"model file not found: {p}", EXIT_DATA) from None
        except (ModelFormatError, KeyError, ValueError, OSError) as exc:
            raise CliError(f"cannot read model {p}: {exc}", EXIT_DATA) from None
    return models


# ---------------------------------------------------------------------------
# commands


def dry_run(cfg: RunConfig) -> dict:
    """Build the root, one split and one deepen step to check that shapes compile."""
    shape = tuple(cfg.data.input_shape)
    if not shape:
        raise CliError("[data] input_shape is required for a dry run", EXIT_USAGE)
    if cfg.data.kind == "csv":
        task = Task.regression(cfg.data.target_cols or 1)
    else:
        task = Task.classification(cfg.data.num_classes)
    specs = cfg.specs()
    try:
        model = make_root_model(task, shape, specs, cfg.seed)
        model = split_leaf(model, model.root, specs.router, specs.solver, cfg.seed)
        left = model.nodes[model.root].left
        if not specs.transformer.is_identity:
            for _ in range(max(2, specs.downsample_freq)):
                model = deepen_edge(model, left, specs.transformer, specs.solver, cfg.seed)
    except ValueError as exc:
        raise CliError(f"modules do not compile for input {shape}: {exc}", EXIT_USAGE) from None
    return {"ok": True, "leaf_feature_shape": list(model.feature_shape(left)), "num_leaves": model.num_leaves}


def cmd_train(
    config_path: str,
    seed: int | None = None,
    max_steps: int | None = None,
    out_dir: str | None = None,
    parallel_candidates: bool = False,
    validate_only: bool = False,
) -> int:
    """Grow and refine a tree; write model, log, growth history and test report."""
    try:
        cfg = load_config(config_path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    except ConfigError as exc:
        raise CliError(f"{config_path}: {exc}", EXIT_USAGE) from None
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if max_steps is not None or parallel_candidates:
        cfg = replace(
            cfg,
            train=replace(
                cfg.train,
                max_steps=max_steps if max_steps is not None else cfg.train.max_steps,
                parallel_candidates=parallel_candidates or cfg.train.parallel_candidates,
            ),
        )
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if validate_only:
        t0 = time.perf_counter()
        info = dry_run(cfg)
        info["seconds"] = round(time.perf_counter() - t0, 3)
        print(json.dumps(info, sort_keys=True))
        return EXIT_OK

    full = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    try:
        train, val = split_train_val(full, cfg.train.val_fraction, cfg.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    mean = None
    if cfg.data.preprocess == MEAN_SUBTRACT:
        mean = fit_mean(train, per_feature=cfg.data.per_feature_mean)
    elif cfg.data.preprocess not in ("none", None):
        raise CliError(f"unknown preprocess policy {cfg.data.preprocess!r}", EXIT_USAGE)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", buffering=1) as logf:

        def log(record: dict) -> None:
            logf.write(json.dumps(record, sort_keys=True) + "\n")

        try:
            result = fit(full.task, cfg.specs(), train, val, cfg.train, log, mean)
        except TrainingError as exc:
            raise CliError(f"training failed: {exc}", EXIT_TRAINING) from None
        except FloatingPointError as exc:
            raise CliError(f"training failed: {exc}", EXIT_TRAINING) from None

    model = result.model
    save_model(model, out / "model.json")
    history = {
        "steps": [s.to_dict() for s in result.growth.state.history],
        "optimal_leaves": sorted(result.growth.state.optimal),
        "final_num_leaves": model.num_leaves,
        "refine_epochs": result.refinement.epochs,
        "selected_from_refinement": result.refinement.from_refinement,
    }
    (out / "growth_history.json").write_text(json.dumps(history, indent=1) + "\n")
    report = evaluate(model, test, cfg.train.batch_size)
    (out / "report.json").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(
    model_paths: list[str],
    data_paths: list[str],
    modes: list[str] | None = None,
    seed: int = 0,
) -> int:
    """Print a metrics report; several model paths evaluate an ensemble."""
    models = _load_models(model_paths)
    m0 = models[0]
    data = _load_eval_data(data_paths, m0.task, m0.input_shape)
    modes = modes or ["multi", "single"]
    if len(models) > 1:
        try:
            out = evaluate_ensemble(models, data)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        if any(m not in ("multi", "single") for m in modes):
            raise CliError("ensembles support only multi and single modes", EXIT_USAGE)
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK
    report = evaluate(m0, data)
    if "sampled" in modes:
        report.extra["error_sampled"] = sampled_path_eval(m0, data, seed)
    if "least-likely" in modes:
        try:
            report.extra["error_least_likely"] = least_likely_path_eval(m0, data)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
        report.extra["least_likely_tie_break"] = "lowest leaf id"
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_export(model_path: str, data_paths: list[str], prune_below: float | None = None, out: str | None = None) -> int:
    """Write Graphviz DOT text for a model, optionally pruning rare leaves first."""
    (model,) = _load_models([model_path])
    data = _load_eval_data(data_paths, model.task, model.input_shape)
    if prune_below is not None:
        model = prune_rarely_visited(model, data, prune_below)
    text = export_dot(model, data)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(model_path: str) -> int:
    """Print topology, per-module parameter counts and totals."""
    (model,) = _load_models([model_path])
    print(model_summary(model))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antree", description="Adaptive neural trees.")
    p.add_argument("--version", action="version", version=f"antree {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="grow and refine a tree from a config file")
    t.add_argument("--config", required=True, help=f"config path or preset name ({', '.join(PRESETS)})")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--max-steps", type=int, help="cap optimiser steps per training phase (smoke runs)")
    t.add_argument("--out-dir", help="override the output directory")
    t.add_argument("--parallel-candidates", action="store_true", help="train split/deepen candidates concurrently")
    t.add_argument("--dry-run", action="store_true", help="validate config and module shapes without training")

    e = sub.add_parser("eval", help="evaluate one model or an ensemble")
    e.add_argument("--model", action="append", required=True, help="model file (repeat for an ensemble)")
    e.add_argument("--data", action="append", required=True, help="IDX images and labels, or one CSV")
    e.add_argument(
        "--mode",
        action="append",
        choices=["multi", "single", "sampled", "least-likely"],
        help="inference modes to report (repeatable; default multi and single)",
    )
    e.add_argument("--seed", type=int, default=0, help="seed for sampled routes")

    x = sub.add_parser("export", help="write a Graphviz DOT rendering of a model")
    x.add_argument("--model", required=True)
    x.add_argument("--data", action="append", required=True)
    x.add_argument("--prune-below", type=float, help="drop leaves visited less often than this first")
    x.add_argument("--out", help="output file (default stdout)")

    i = sub.add_parser("inspect", help="print topology and parameter counts")
    i.add_argument("--model", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return cmd_train(
                args.config,
                seed=args.seed,
                max_steps=args.max_steps,
                out_dir=args.out_dir,
                parallel_candidates=args.parallel_candidates,
                validate_only=args.dry_run,
            )
        if args.command == "eval":
            return cmd_eval(args.model, args.data, args.mode, args.seed)
        if args.command == "export":
            return cmd_export(args.model, args.data, args.prune_below, args.out)
        return cmd_inspect(args.model)
    except CliError as exc:
        print(f"antree: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
