"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Operations on tensors that need
gradients record a :class:`Node` holding the parents and a closure mapping the
output gradient to parent gradients. The graph is rebuilt on every forward
pass; :func:`build_tape` linearises it into topological order and
:func:`backward` replays that tape in reverse.

Leaves only receive ``.grad`` when ``trainable`` is set. Intermediate tensors
carry gradients transiently during the backward sweep.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError

DTYPE = np.float64
LEAKY_SLOPE = 0.01

_GELU_C = np.sqrt(2.0 / np.pi)


class Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: tuple, backward_fn: Callable, op: str):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "trainable", "name", "node", "requires_grad", "__weakref__")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.grad: np.ndarray | None = None
        self.trainable = bool(trainable)
        self.name = name
        self.node: Node | None = None
        self.requires_grad = self.trainable

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"tensor of shape {self.shape} is not a scalar")

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        if self.node is None:
            self.requires_grad = self.trainable

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, trainable={self.trainable})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(tuple(parents), backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """``a + const`` where ``const`` is a plain array that never needs a gradient."""
    sa = a.shape
    return _result(a.data + const, (a,), lambda g: (_unbroadcast(g, sa),), "add_constant")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    sa = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(sa),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    sa = a.shape

    def bw(g):
        out = np.zeros(sa, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), bw, "take")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    sa = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= sa[0]):
        raise DataError(f"token id out of range [0, {sa[0]})")

    def bw(g):
        out = np.zeros(sa, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, sa[1]))
        return (out,)

    return _result(table.data[ids], (table,), bw, "embedding")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    sa = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[m, k] @ [k, n]``, batched ``[..., m, k] @ [k, n]`` (weight
    shared over the batch) and equal-rank batched products.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb
    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        def bw(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb
    else:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# nonlinear maps


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    _check_finite(xd, "softmax")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _result(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


NONLINEARITIES = ("relu", "leakyrelu", "swish", "gelu")


def nonlinearity(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    """Elementwise activation. ``gelu`` uses the tanh approximation."""
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return _result(xd * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "leakyrelu":
        factor = np.where(xd > 0, 1.0, slope)
        return _result(xd * factor, (x,), lambda g: (g * factor,), "leakyrelu")
    if kind == "swish":
        sig = _sigmoid(xd)
        return _result(xd * sig, (x,), lambda g: (g * (sig + xd * sig * (1.0 - sig)),), "swish")
    if kind == "gelu":
        x2 = xd * xd
        t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
        out = 0.5 * xd * (1.0 + t)
        deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return _result(out, (x,), lambda g: (g * deriv,), "gelu")
    raise ConfigError(f"unknown nonlinearity {kind!r}; expected one of {NONLINEARITIES}")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy expects [b, c] logits and b labels, got {z.shape} and {labels.shape}")
    b, c = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    _check_finite(z, "cross_entropy")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - shifted[rows, labels]))

    def bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Return every recorded tensor reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Gradients add onto any existing ``.grad`` so several losses can be
    accumulated before an optimiser step.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.trainable:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
