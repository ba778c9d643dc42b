"""Small reverse-mode autodiff over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape every op is a plain
numpy evaluation, which is what inference code relies on.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
over the broadcast axes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TensorError", "ShapeError", "NonFiniteError", "TapeError",
    "tensor", "parameter", "backward",
    "add", "sub", "mul", "neg", "matmul", "tanh", "sigmoid", "silu", "exp", "log", "sqrt",
    "softmax", "log_softmax", "layer_norm", "sum", "mean", "reshape", "transpose",
    "index", "concat", "stack", "embedding", "ste_round", "make_rng",
]


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class NonFiniteError(TensorError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced NaN or Inf")


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TensorError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; everything computed inside is recorded when it
    depends on a tensor that requires grad. ``backward`` can run once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward called twice on the same tape; re-record the forward pass")
        if not self.nodes:
            raise TapeError("backward on an empty tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        # recording order is a topological order of the graph
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._node = _Node(op, out, inputs, bw)
        out._tape = tape
        tape.record(out._node)
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (_reduce_to(g * bd, ad.shape) if a.requires_grad else None,
                _reduce_to(g * ad, bd.shape) if b.requires_grad else None)

    return _finish("mul", ad * bd, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _finish("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _finish("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _finish("log", y, (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)
    return _finish("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def ste_round(a) -> Tensor:
    """Round half to even in the forward pass; identity gradient."""
    a = _wrap(a)
    return _finish("ste_round", np.round(a.data), (a,), lambda g: (g,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a`` (..., n, k) times ``b`` (k, m) or (..., k, m) with equal leading dims."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), bw)


# ---------------------------------------------------------------- normalisation

def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the trailing axis. ``mask`` (broadcastable, bool) keeps True entries."""
    a = _wrap(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_broadcast("softmax", x, mask)
        if not mask.any(axis=-1).all():
            raise TensorError("softmax: a row has no permitted entries")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", y, (a,), bw)


def log_softmax(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return _finish("log_softmax", y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a, eps: float = 1e-12) -> Tensor:
    """Normalise the trailing axis to zero mean and unit (biased) variance."""
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _finish("layer_norm", y, (a,), bw)


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _finish("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _finish("reshape", y, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _finish("index", np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _finish("concat", y, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    try:
        y = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    n = len(ts)
    return _finish("stack", y, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def embedding(weight, idx: np.ndarray) -> Tensor:
    """Row lookup ``weight[idx]`` for an integer index array of any shape."""
    weight = _wrap(weight)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TensorError("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise TensorError(f"embedding: index out of range for table of {weight.shape[0]} rows")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _finish("embedding", weight.data[idx], (weight,), bw)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator stream for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
