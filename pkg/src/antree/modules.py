"""Router, transformer and solver modules compiled from textual recipes.

Recipe grammar (comma separated, whitespace ignored)::

    convK-C     KxK convolution with C kernels, stride 1, same padding
    fcN         fully connected layer with N outputs (flattens its input)
    relu | tanh | sigmoid
    gap         global average pooling over the spatial axes
    maxpool     2x2 max pooling (floors odd extents)
    lc          linear classifier: flatten, affine to the class count, softmax
    lr          linear regressor: flatten, affine to the target dimension
    identity    no-op (an empty recipe means the same)

Routers must end in ``sigmoid`` with a single output unit; solvers must end in
``lc`` or ``lr``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import PrimitiveKind, ShapeError, Tensor, apply_primitive, ops

ROUTER = "router"
TRANSFORMER = "transformer"
SOLVER = "solver"
KINDS = (ROUTER, TRANSFORMER, SOLVER)

# router outputs are kept away from exact 0/1 before entering products/logs
ROUTER_CLAMP = 1e-7

_CONV_RE = re.compile(r"^conv(\d+)-(\d+)$")
_FC_RE = re.compile(r"^fc(\d+)$")
_SIMPLE = {"relu", "tanh", "sigmoid", "gap", "maxpool", "lc", "lr", "identity"}


class RecipeError(ValueError):
    pass


def parse_recipe(text: str) -> tuple[str, ...]:
    text = text.strip().strip('"').strip("'")
    tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
    for t in tokens:
        if t in _SIMPLE or _CONV_RE.match(t) or _FC_RE.match(t):
            continue
        raise RecipeError(f"unknown layer token {t!r} in recipe {text!r}")
    return tuple(t for t in tokens if t != "identity")


@dataclass(frozen=True)
class ModuleSpec:
    kind: str
    layers: tuple[str, ...]
    downsample_freq: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RecipeError(f"module kind must be one of {KINDS}, got {self.kind!r}")
        if self.downsample_freq < 0:
            raise RecipeError("downsample_freq must be >= 0")
        if self.kind == ROUTER and (not self.layers or self.layers[-1] != "sigmoid"):
            raise RecipeError(f"router recipe must end with sigmoid: {self.recipe!r}")
        if self.kind == SOLVER and (not self.layers or self.layers[-1] not in ("lc", "lr")):
            raise RecipeError(f"solver recipe must end with lc or lr: {self.recipe!r}")
        for t in self.layers[:-1]:
            if t in ("lc", "lr"):
                raise RecipeError(f"{t} may only appear last: {self.recipe!r}")

    @classmethod
    def parse(cls, kind: str, text: str, downsample_freq: int = 0) -> "ModuleSpec":
        return cls(kind, parse_recipe(text), downsample_freq)

    @classmethod
    def identity(cls) -> "ModuleSpec":
        return cls(TRANSFORMER, ())

    @property
    def recipe(self) -> str:
        return ",".join(self.layers) if self.layers else "identity"

    @property
    def is_identity(self) -> bool:
        return not self.layers

    def with_pool(self) -> "ModuleSpec":
        return ModuleSpec(self.kind, self.layers + ("maxpool",), self.downsample_freq)


@dataclass
class _Layer:
    token: str
    kind: PrimitiveKind | None
    params: tuple[str, ...]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    flatten: bool = False


@dataclass
class ModuleInstance:
    """A built module: its spec, shapes, and named parameter tensors."""

    spec: ModuleSpec
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    params: dict[str, Tensor]
    out_dim: int | None = None
    layers: list[_Layer] = field(default_factory=list, repr=False)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def is_identity(self) -> bool:
        return not self.layers

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        """Batched forward pass; ``x`` carries a leading batch axis."""
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"{self.kind} expects per-sample shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        h = x
        for layer in self.layers:
            if layer.flatten:
                h = apply_primitive(PrimitiveKind.FLATTEN, [h], batched=True)
            if layer.kind is None:
                continue
            h = apply_primitive(
                layer.kind, [h], [self.params[n] for n in layer.params], batched=True
            )
        return h

    def flops(self) -> int:
        """Per-sample FLOPs: MAC = 2, bias add = 1 per output, activation = 1
        per element, pooling/GAP = 1 per consumed input element."""
        total = 0
        for layer in self.layers:
            t = layer.token
            n_in = math.prod(layer.in_shape)
            n_out = math.prod(layer.out_shape)
            if t.startswith("conv"):
                out_c, in_c = self.params[layer.params[0]].shape[:2]
                k = self.params[layer.params[0]].shape[2]
                hw = layer.out_shape[1] * layer.out_shape[2]
                total += 2 * k * k * in_c * out_c * hw + out_c * hw
            elif t.startswith("fc") or t in ("lc", "lr"):
                w = self.params[layer.params[0]]
                total += 2 * w.shape[0] * w.shape[1] + w.shape[0]
            elif t in ("relu", "tanh", "sigmoid"):
                total += n_in
            elif t == "maxpool":
                c, h, w = layer.in_shape
                total += c * (h // 2) * 2 * (w // 2) * 2
            elif t == "gap":
                total += n_in
            elif t == "softmax":
                total += n_out
        return total


def _init_bound(fan_in: int, fan_out: int, relu_follows: bool) -> float:
    if relu_follows:
        return math.sqrt(6.0 / fan_in)
    return math.sqrt(6.0 / (fan_in + fan_out))


def build_module(
    spec: ModuleSpec,
    input_shape: Sequence[int],
    rng_seed: int,
    out_dim: int | None = None,
) -> ModuleInstance:
    """Compile ``spec`` for per-sample ``input_shape`` and initialize weights.

    Weights are drawn uniformly from (-a, a) with a = sqrt(6/fan_in) when a
    ReLU follows the layer and a = sqrt(6/(fan_in+fan_out)) otherwise; biases
    start at zero.  ``out_dim`` is the class count or target dimension and is
    required by solvers.
    """
    shape = tuple(int(s) for s in input_shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"invalid input shape {shape}")
    if spec.kind == SOLVER and out_dim is None:
        raise RecipeError("solver modules need out_dim (class count or target dimension)")
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    layers: list[_Layer] = []
    tokens = spec.layers
    for i, tok in enumerate(tokens):
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        relu_next = nxt == "relu"
        where = f"layer {i} ({tok!r}) of {spec.kind} recipe {spec.recipe!r}"
        conv = _CONV_RE.match(tok)
        fc = _FC_RE.match(tok)
        if conv:
            k, c_out = int(conv.group(1)), int(conv.group(2))
            if len(shape) != 3:
                raise ShapeError(f"{where}: needs a [C,H,W] input, got {shape}")
            c_in = shape[0]
            a = _init_bound(c_in * k * k, c_out * k * k, relu_next)
            wn, bn = f"{i}.weight", f"{i}.bias"
            params[wn] = Tensor(rng.uniform(-a, a, size=(c_out, c_in, k, k)), name=wn)
            params[bn] = Tensor(np.zeros(c_out), name=bn)
            out = (c_out, shape[1], shape[2])
            layers.append(_Layer(tok, PrimitiveKind.CONV2D, (wn, bn), shape, out))
        elif fc or tok in ("lc", "lr"):
            n_in = math.prod(shape)
            n_out = int(fc.group(1)) if fc else int(out_dim)
            a = _init_bound(n_in, n_out, relu_next)
            wn, bn = f"{i}.weight", f"{i}.bias"
            params[wn] = Tensor(rng.uniform(-a, a, size=(n_out, n_in)), name=wn)
            params[bn] = Tensor(np.zeros(n_out), name=bn)
            layers.append(
                _Layer(tok, PrimitiveKind.AFFINE, (wn, bn), shape, (n_out,), flatten=len(shape) != 1)
            )
            if tok == "lc":
                layers.append(_Layer("softmax", PrimitiveKind.LOG_SOFTMAX, (), (n_out,), (n_out,)))
            out = (n_out,)
        elif tok in ("relu", "tanh", "sigmoid"):
            kind = {
                "relu": PrimitiveKind.RELU,
                "tanh": PrimitiveKind.TANH,
                "sigmoid": PrimitiveKind.SIGMOID,
            }[tok]
            out = shape
            layers.append(_Layer(tok, kind, (), shape, out))
        elif tok == "gap":
            if len(shape) != 3:
                raise ShapeError(f"{where}: needs a [C,H,W] input, got {shape}")
            out = (shape[0],)
            layers.append(_Layer(tok, PrimitiveKind.GLOBAL_AVG_POOL, (), shape, out))
        elif tok == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeError(f"{where}: needs a [C,H,W] input with extents >= 2, got {shape}")
            out = (shape[0], shape[1] // 2, shape[2] // 2)
            layers.append(_Layer(tok, PrimitiveKind.MAXPOOL2X2, (), shape, out))
        else:  # pragma: no cover - parse_recipe rejects everything else
            raise RecipeError(f"{where}: unsupported token")
        shape = out
    if spec.kind == ROUTER and shape != (1,):
        raise ShapeError(f"router recipe {spec.recipe!r} must produce one unit, produces {shape}")
    return ModuleInstance(
        spec=spec,
        input_shape=tuple(int(s) for s in input_shape),
        output_shape=shape,
        params=params,
        out_dim=out_dim,
        layers=layers,
    )


def module_flops(m: ModuleInstance) -> int:
    return m.flops()


# ---------------------------------------------------------------------------
# per-module forwards


def _batched(m: ModuleInstance, x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(t.shape) == m.input_shape:
        return Tensor._wrap(t.data[None], t.requires_grad), True
    return t, False


def router_probability(r: ModuleInstance, x: Tensor) -> Tensor:
    """Batched clamped left-branch probability, shape [B]."""
    out = r.forward(x)
    return ops.clamp(ops.reshape(out, (out.shape[0],)), ROUTER_CLAMP, 1.0 - ROUTER_CLAMP)


def router_forward(r: ModuleInstance, x) -> float:
    """Probability of sending a single sample ``x`` to the LEFT child."""
    if r.kind != ROUTER:
        raise RecipeError(f"router_forward called on a {r.kind}")
    xb, single = _batched(r, x)
    if not single:
        raise ShapeError(f"router expects shape {r.input_shape}, got {tuple(xb.shape)}")
    return float(router_probability(r, xb).data[0])


def transformer_forward(t: ModuleInstance, x) -> Tensor:
    if t.kind != TRANSFORMER:
        raise RecipeError(f"transformer_forward called on a {t.kind}")
    xb, single = _batched(t, x)
    if not single:
        raise ShapeError(f"transformer expects shape {t.input_shape}, got {tuple(xb.shape)}")
    out = t.forward(xb)
    return Tensor._wrap(out.data[0])


@dataclass(frozen=True)
class PredictiveDistribution:
    """Either class probabilities or a regression mean."""

    task: str
    values: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        if self.task != "classification":
            raise AttributeError("regression predictions have no class probabilities")
        return self.values

    @property
    def mean(self) -> np.ndarray:
        if self.task != "regression":
            raise AttributeError("classification predictions have no regression mean")
        return self.values


def solver_task(s: ModuleInstance) -> str:
    return "classification" if s.spec.layers[-1] == "lc" else "regression"


def solver_forward(s: ModuleInstance, x) -> PredictiveDistribution:
    if s.kind != SOLVER:
        raise RecipeError(f"solver_forward called on a {s.kind}")
    xb, single = _batched(s, x)
    if not single:
        raise ShapeError(f"solver expects shape {s.input_shape}, got {tuple(xb.shape)}")
    out = s.forward(xb).data[0]
    task = solver_task(s)
    if task == "classification":
        p = np.exp(out)
        return PredictiveDistribution(task, p / p.sum())
    return PredictiveDistribution(task, out.copy())
