"""Adaptive neural trees: tree-structured models grown from neural modules.

The package bundles a small reverse-mode autodiff engine, module recipes for
routers, transformers and solvers, the tree model with multi-path and
single-path inference, the growth and refinement procedures, data loaders,
evaluation tools and a command-line interface.
"""

__version__ = "0.1.0"

from .autodiff import PrimitiveKind, Tape, Tensor, apply_primitive, backward, grad_check, ops
from .modules import ModuleSpec, PredictiveDistribution, build_module, parse_recipe
from .tree import (
    AntModel,
    GrowthSpecs,
    Task,
    count_flops,
    count_params,
    deepen_edge,
    make_root_model,
    predict_multi_path,
    predict_single_path,
    prune_leaf,
    split_leaf,
)
from .training import TrainConfig, choose_growth, fit, grow, nll, refine, train_ensemble, train_local
from .data import Dataset, load_csv, load_idx, split_train_val
from .evaluation import (
    MetricsReport,
    ensemble_predict,
    evaluate,
    export_dot,
    least_likely_path_eval,
    sampled_path_eval,
)
from .serialization import load_model, save_model

__all__ = [
    "AntModel", "Dataset", "GrowthSpecs", "MetricsReport", "ModuleSpec", "PredictiveDistribution",
    "PrimitiveKind", "Tape", "Task", "Tensor", "TrainConfig", "apply_primitive", "backward",
    "build_module", "choose_growth", "count_flops", "count_params", "deepen_edge", "ensemble_predict",
    "evaluate", "export_dot", "fit", "grad_check", "grow", "least_likely_path_eval", "load_csv",
    "load_idx", "load_model", "make_root_model", "nll", "ops", "parse_recipe", "predict_multi_path",
    "predict_single_path", "prune_leaf", "refine", "sampled_path_eval", "save_model", "split_leaf",
    "split_train_val", "train_ensemble", "train_local",
]
