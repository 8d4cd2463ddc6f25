"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records its inputs and a closure mapping the output
gradient to input gradients. Nodes carry a monotonically increasing sequence
number, so ``backward`` can replay the executed graph in exact reverse order.
"""

from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "tensor",
    "zeros",
    "no_grad",
    "grad_enabled",
    "count_flops",
    "flop_scope",
    "rng",
    "trunc_normal",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "broadcast_leading",
    "take",
    "put_add",
    "tsum",
    "mean",
    "relu",
    "gelu",
    "tanh",
    "exp",
    "softmax",
    "layernorm",
    "softmax_crossentropy",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_seq = itertools.count()


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.flops: dict[str, int] | None = None
        self.scope = ""


_state = _State()


class Tensor:
    """An n-dimensional float64 array that may participate in a graph."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- state


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def count_flops():
    """Tally multiply-adds per scope while active.

    Matrix products count under the scope name, elementwise ops under
    ``"<scope>:ew"``.
    """
    prev = _state.flops
    counts: dict[str, int] = {}
    _state.flops = counts
    try:
        yield counts
    finally:
        _state.flops = prev


@contextmanager
def flop_scope(name: str):
    prev = _state.scope
    _state.scope = name
    try:
        yield
    finally:
        _state.scope = prev


def _tally(n: int, elementwise: bool = False) -> None:
    counts = _state.flops
    if counts is None:
        return
    key = _state.scope + (":ew" if elementwise else "")
    counts[key] = counts.get(key, 0) + int(n)


def rng(seed: int, *names) -> np.random.Generator:
    """Counter-based generator for the stream named by ``names`` under ``seed``.

    Streams with different names are independent; the same (seed, names)
    always yields the same sequence.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations (resampled)."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# ---------------------------------------------------------------- graph plumbing


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out._seq = -1
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._seq = next(_seq)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _suffix_of(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or b.size == 1 and b.ndim == 0 or a.size == 1 and a.ndim == 0:
        return
    if _suffix_of(sb, sa) or _suffix_of(sa, sb):
        return
    raise ShapeError(f"{op}: shapes {list(sa)} and {list(sb)} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b, "add")
    data = a.data + b.data
    _tally(data.size, elementwise=True)
    sa, sb = a.shape, b.shape
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b, "sub")
    data = a.data - b.data
    _tally(data.size, elementwise=True)
    sa, sb = a.shape, b.shape
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b, "mul")
    data = a.data * b.data
    _tally(data.size, elementwise=True)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(data, (a, b), grad_fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), grad_fn, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), grad_fn, "softmax")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not align")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {list(a.shape)} and {list(b.shape)} differ")
    ad, bd = a.data, b.data
    data = ad @ bd
    _tally(data.size * ad.shape[-1])

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in).

    Row ``i`` of ``weight`` produces output channel ``i``.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {list(bias.shape)} vs weight {list(weight.shape)}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    data = (x2 @ wd.T).reshape(xd.shape[:-1] + (wd.shape[0],))
    _tally(data.size * wd.shape[1])
    if bias is not None:
        data += bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, grad_fn, "linear")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[list(p.shape) for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, parts, grad_fn, "concat")


def broadcast_leading(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading axes ``lead``."""
    lead = tuple(lead)
    data = np.broadcast_to(a.data, lead + a.shape).copy()
    axes = tuple(range(len(lead)))
    return _result(data, (a,), lambda g: (g.sum(axis=axes),), "broadcast")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    else:
        data = data.copy()
    shape = a.shape

    basic = _is_basic_index(idx)

    def grad_fn(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(data, (a,), grad_fn, "getitem")


def take(a: Tensor, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Gather distinct ``indices`` along ``axis``."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: indices out of range for axis of length {n}")
    data = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        view = np.moveaxis(out, axis, 0)
        view[idx] = np.moveaxis(g, axis, 0)
        return (out,)

    return _result(data, (a,), grad_fn, "take")


def put_add(a: Tensor, indices: Sequence[int], delta: Tensor, axis: int = -1) -> Tensor:
    """Copy of ``a`` with ``delta`` added at ``indices`` along ``axis``.

    Positions outside ``indices`` are copied bit-for-bit.
    """
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"put_add: indices out of range for axis of length {n}")
    expect = list(a.shape)
    expect[axis] = idx.size
    if list(delta.shape) != expect:
        raise ShapeError(f"put_add: delta {list(delta.shape)} vs expected {expect}")
    data = a.data.copy()
    view = np.moveaxis(data, axis, 0)
    view[idx] = view[idx] + np.moveaxis(delta.data, axis, 0)
    _tally(delta.size, elementwise=True)

    def grad_fn(g):
        return g, np.take(g, idx, axis=axis)

    return _result(data, (a, delta), grad_fn, "put_add")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(data, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- fused ops


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: last axis {d} vs gamma {list(gamma.shape)}, beta {list(beta.shape)}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    data = xhat * gd + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), grad_fn, "layernorm")


def softmax_crossentropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_crossentropy: logits must be B x C, got {list(logits.shape)}")
    b, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise ShapeError(f"softmax_crossentropy: {y.shape[0]} labels for batch of {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"softmax_crossentropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    data = np.asarray((lse - z[rows, y]).mean())

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (p * (g / b),)

    return _result(data, (logits,), grad_fn, "softmax_crossentropy")


# ---------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        g = np.ones(loss.shape)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

