"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Every primitive accepts an optional leading batch axis (``batched=True``), so
the modules run whole minibatches through one recorded operation.  Recording
only happens while a :class:`Tape` is active *and* at least one operand
requires a gradient; inference therefore pays nothing for the machinery.
"""

from __future__ import annotations

import contextvars
import enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "PrimitiveKind",
    "ShapeError",
    "NonFiniteError",
    "apply_primitive",
    "backward",
    "grad_check",
    "ops",
]

# im2col working-set cap (elements) for one convolution chunk.
_CONV_CHUNK_ELEMS = 262_144


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array plus a gradient flag.

    The wrapped array is never modified in place; optimizers swap ``data``
    for a fresh array instead.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "operands", "vjp")

    def __init__(self, out: Tensor, operands: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.operands = operands
        self.vjp = vjp


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "antree_active_tape", default=None
)


class Tape:
    """Ordered record of primitives applied while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss, params)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


def _record(out_arr: np.ndarray, operands: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in operands):
        out = Tensor._wrap(out_arr, requires_grad=True)
        tape.records.append(_Record(out, tuple(operands), vjp))
        return out
    return Tensor._wrap(out_arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# convolution helpers (stride 1, same padding)


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _conv_same(x: np.ndarray, w: np.ndarray, pad_lo: int, pad_hi: int) -> np.ndarray:
    """Cross-correlate batched ``x`` [B,C,H,W] with ``w`` [O,C,k,k]."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)))
    wmat = w.reshape(o, c * k * k).T
    per_sample = h * wd * c * k * k
    step = max(1, _CONV_CHUNK_ELEMS // max(per_sample, 1))
    out = np.empty((b, o, h, wd))
    for s in range(0, b, step):
        win = sliding_window_view(xp[s : s + step], (k, k), axis=(2, 3))
        # win: [n, C, H, W, k, k] -> [n, H, W, C, k, k]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
        res = cols @ wmat
        out[s : s + step] = res.reshape(-1, h, wd, o).transpose(0, 3, 1, 2)
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, pad_lo: int, pad_hi: int) -> np.ndarray:
    b, c, h, wd = x.shape
    o = g.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)))
    per_sample = h * wd * c * k * k
    step = max(1, _CONV_CHUNK_ELEMS // max(per_sample, 1))
    acc = np.zeros((c * k * k, o))
    for s in range(0, b, step):
        win = sliding_window_view(xp[s : s + step], (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
        gmat = g[s : s + step].transpose(0, 2, 3, 1).reshape(-1, o)
        acc += cols.T @ gmat
    return acc.T.reshape(o, c, k, k)


# ---------------------------------------------------------------------------
# primitive implementations: forward(inputs, params, batched) -> (out, vjp)


def _affine(inputs, params, batched):
    (x,) = inputs
    w, bias = params
    rank = 2 if batched else 1
    if x.ndim != rank or w.ndim != 2 or bias.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"Affine: input shape {x.shape} incompatible with weight shape {w.shape}"
            f" and bias shape {bias.shape}"
        )
    out = x @ w.T + bias

    def vjp(g, need_input=True, need_params=True):
        gx = g @ w if need_input else None
        if not need_params:
            return (gx,), (None, None)
        if batched:
            return (gx,), (g.T @ x, g.sum(axis=0))
        return (gx,), (np.outer(g, x), g.copy())

    return out, vjp


def _conv2d(inputs, params, batched):
    (x,) = inputs
    w, bias = params
    rank = 4 if batched else 3
    if (
        x.ndim != rank
        or w.ndim != 4
        or w.shape[2] != w.shape[3]
        or x.shape[-3] != w.shape[1]
        or bias.shape != (w.shape[0],)
    ):
        raise ShapeError(
            f"Conv2D: input shape {x.shape} incompatible with kernel shape {w.shape}"
            f" and bias shape {bias.shape}"
        )
    xb = x if batched else x[None]
    k = w.shape[2]
    lo, hi = _same_pads(k)
    out = _conv_same(xb, w, lo, hi) + bias[None, :, None, None]

    def vjp(g, need_input=True, need_params=True):
        gb = g if batched else g[None]
        gx = gw = gbias = None
        if need_input:
            # input gradient: correlate with the spatially flipped, channel-swapped kernel
            wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_same(gb, wf, hi, lo)
            gx = gx if batched else gx[0]
        if need_params:
            gw = _conv_weight_grad(xb, gb, k, lo, hi)
            gbias = gb.sum(axis=(0, 2, 3))
        return (gx,), (gw, gbias)

    return (out if batched else out[0]), vjp


def _elementwise(name, fn, dfn):
    def prim(inputs, params, batched):
        (x,) = inputs
        y = fn(x)

        def vjp(g):
            return (g * dfn(x, y),), ()

        return y, vjp

    prim.__name__ = name
    return prim


def _sigmoid_fn(x):
    # split by sign for overflow-free evaluation
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_relu = _elementwise("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))
_tanh = _elementwise("tanh", np.tanh, lambda x, y: 1.0 - y * y)
_sigmoid = _elementwise("sigmoid", _sigmoid_fn, lambda x, y: y * (1.0 - y))


def _maxpool2x2(inputs, params, batched):
    (x,) = inputs
    rank = 4 if batched else 3
    if x.ndim != rank:
        raise ShapeError(f"MaxPool2x2: expected rank {rank} input, got shape {x.shape}")
    xb = x if batched else x[None]
    b, c, h, w = xb.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"MaxPool2x2: spatial extent too small in shape {x.shape}")
    blocks = (
        xb[:, :, : 2 * h2, : 2 * w2]
        .reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = g if batched else g[None]
        gblocks = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(gblocks, arg[..., None], gb[..., None], axis=-1)
        gx = np.zeros((b, c, h, w))
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gblocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        )
        return (gx if batched else gx[0],), ()

    return (out if batched else out[0]), vjp


def _gap(inputs, params, batched):
    (x,) = inputs
    rank = 4 if batched else 3
    if x.ndim != rank:
        raise ShapeError(f"GlobalAvgPool: expected rank {rank} input, got shape {x.shape}")
    hw = x.shape[-1] * x.shape[-2]
    out = x.mean(axis=(-2, -1))

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / hw, x.shape).copy(),), ()

    return out, vjp


def _log_softmax(inputs, params, batched):
    (x,) = inputs
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        sm = np.exp(out)
        return (g - sm * g.sum(axis=-1, keepdims=True),), ()

    return out, vjp


def _add(inputs, params, batched):
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError(f"Add: operand shapes {a.shape} and {b.shape} differ")
    return a + b, lambda g: ((g, g), ())


def _flatten(inputs, params, batched):
    (x,) = inputs
    shape = x.shape
    out = x.reshape(shape[0], -1) if batched else x.reshape(-1)
    return out, lambda g: ((g.reshape(shape),), ())


class PrimitiveKind(enum.Enum):
    AFFINE = "Affine"
    CONV2D = "Conv2D"
    RELU = "ReLU"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"
    MAXPOOL2X2 = "MaxPool2x2"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    LOG_SOFTMAX = "LogSoftmax"
    ADD = "Add"
    FLATTEN = "Flatten"


_PRIMITIVES = {
    PrimitiveKind.AFFINE: (_affine, 1, 2),
    PrimitiveKind.CONV2D: (_conv2d, 1, 2),
    PrimitiveKind.RELU: (_relu, 1, 0),
    PrimitiveKind.TANH: (_tanh, 1, 0),
    PrimitiveKind.SIGMOID: (_sigmoid, 1, 0),
    PrimitiveKind.MAXPOOL2X2: (_maxpool2x2, 1, 0),
    PrimitiveKind.GLOBAL_AVG_POOL: (_gap, 1, 0),
    PrimitiveKind.LOG_SOFTMAX: (_log_softmax, 1, 0),
    PrimitiveKind.ADD: (_add, 2, 0),
    PrimitiveKind.FLATTEN: (_flatten, 1, 0),
}


def apply_primitive(
    kind: PrimitiveKind | str,
    inputs: Sequence[Tensor],
    params: Sequence[Tensor] = (),
    *,
    batched: bool = False,
) -> Tensor:
    """Evaluate one primitive and record it on the active tape.

    With ``batched=True`` the leading axis of every input is a batch axis and
    the rank requirements shift by one.
    """
    if isinstance(kind, str):
        kind = PrimitiveKind(kind)
    fn, n_in, n_par = _PRIMITIVES[kind]
    inputs = [as_tensor(t) for t in inputs]
    params = [as_tensor(t) for t in params]
    if len(inputs) != n_in or len(params) != n_par:
        raise ShapeError(
            f"{kind.value}: expected {n_in} input(s) and {n_par} parameter(s), "
            f"got {len(inputs)} and {len(params)}"
        )
    for p in params:
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"{kind.value}: parameter {p.name or ''} has non-finite entries")
    out, vjp = fn([t.data for t in inputs], [p.data for p in params], batched)

    if kind in (PrimitiveKind.AFFINE, PrimitiveKind.CONV2D):
        need_in = any(t.requires_grad for t in inputs)
        need_par = any(p.requires_grad for p in params)

        def full_vjp(g):
            gin, gpar = vjp(g, need_in, need_par)
            return tuple(gin) + tuple(gpar)

    else:

        def full_vjp(g):
            gin, gpar = vjp(g)
            return tuple(gin) + tuple(gpar)

    return _record(out, tuple(inputs) + tuple(params), full_vjp)


# ---------------------------------------------------------------------------
# auxiliary differentiable operations used by the mixture objective


class _Ops:
    """Small set of differentiable helpers beyond the module primitives."""

    @staticmethod
    def mul(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        out = a.data * b.data
        return _record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    @staticmethod
    def add(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        return _record(
            a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        )

    @staticmethod
    def sub(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        return _record(
            a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        )

    @staticmethod
    def rsub(c: float, a) -> Tensor:
        """``c - a`` for a constant ``c``."""
        a = as_tensor(a)
        return _record(c - a.data, (a,), lambda g: (-g,))

    @staticmethod
    def log(a) -> Tensor:
        a = as_tensor(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return _record(out, (a,), lambda g: (g / a.data,))

    @staticmethod
    def exp(a) -> Tensor:
        a = as_tensor(a)
        out = np.exp(a.data)
        return _record(out, (a,), lambda g: (g * out,))

    @staticmethod
    def square(a) -> Tensor:
        a = as_tensor(a)
        return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))

    @staticmethod
    def sum(a, axis=None) -> Tensor:
        a = as_tensor(a)
        out = a.data.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

        return _record(out, (a,), vjp)

    @staticmethod
    def mean(a, axis=None) -> Tensor:
        a = as_tensor(a)
        n = a.data.size if axis is None else a.shape[axis]
        return _Ops.mul(_Ops.sum(a, axis), 1.0 / n)

    @staticmethod
    def clamp(a, lo: float, hi: float) -> Tensor:
        a = as_tensor(a)
        out = np.clip(a.data, lo, hi)
        inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
        return _record(out, (a,), lambda g: (g * inside,))

    @staticmethod
    def reshape(a, shape) -> Tensor:
        a = as_tensor(a)
        old = a.shape
        return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    @staticmethod
    def stack(tensors: Sequence, axis: int = 0) -> Tensor:
        ts = [as_tensor(t) for t in tensors]
        out = np.stack([t.data for t in ts], axis=axis)

        def vjp(g):
            return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

        return _record(out, tuple(ts), vjp)

    @staticmethod
    def logsumexp(a, axis: int) -> Tensor:
        a = as_tensor(a)
        m = np.max(a.data, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            out_k = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
        out = np.squeeze(out_k, axis=axis)

        def vjp(g):
            w = np.exp(a.data - out_k)
            return (np.expand_dims(g, axis) * w,)

        return _record(out, (a,), vjp)

    @staticmethod
    def pick(a, index: np.ndarray) -> Tensor:
        """Row-wise gather: ``a[i, index[i]]`` for a rank-2 ``a``."""
        a = as_tensor(a)
        idx = np.asarray(index, dtype=np.int64)
        rows = np.arange(a.shape[0])
        out = a.data[rows, idx]

        def vjp(g):
            ga = np.zeros(a.shape)
            np.add.at(ga, (rows, idx), g)
            return (ga,)

        return _record(out, (a,), vjp)


ops = _Ops()


# ---------------------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Reverse pass over ``tape`` from the scalar ``loss``.

    Returns a gradient for every tensor in ``wrt`` (zeros when ``loss`` does
    not depend on it).  Without ``wrt``, gradients are returned for every leaf
    tensor flagged ``requires_grad`` that the tape touched.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gt in zip(rec.operands, in_grads):
            if not t.requires_grad or gt is None:
                continue
            if id(t) not in produced:
                leaves[id(t)] = t
            prev = grads.get(id(t))
            grads[id(t)] = gt if prev is None else prev + gt
    if wrt is None:
        return {t: grads[id(t)] for t in leaves.values()}
    result = {}
    for t in wrt:
        g = grads.get(id(t))
        result[t] = np.zeros(t.shape) if g is None else np.asarray(g).reshape(t.shape)
    return result


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative discrepancy between tape gradients and central differences.

    The relative error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if not np.isfinite(y.data).all():
        raise NonFiniteError("grad_check: function value is not finite")
    analytic = backward(tape, y, [x])[x].reshape(-1)
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        fp = fn(Tensor(hi.reshape(base.shape))).data
        fm = fn(Tensor(lo.reshape(base.shape))).data
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NonFiniteError(f"grad_check: non-finite value at coordinate {i}")
        numeric[i] = (float(fp.reshape(-1)[0]) - float(fm.reshape(-1)[0])) / (2.0 * step)
    if flat.size == 0:
        return 0.0
    denom = np.maximum.reduce([np.ones_like(flat), np.abs(analytic), np.abs(numeric)])
    return float(np.max(np.abs(analytic - numeric) / denom))
