"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation that touches a tensor with ``requires_grad``
records a node holding references to its operands and a closure mapping the
output gradient to operand gradients.  Nodes carry a global creation counter,
so the recorded graph doubles as the tape: :func:`backward` visits every node
reachable from the root exactly once, in decreasing creation order, which is
reverse execution order.

Gradients accumulate into ``Tensor.grad`` of leaf tensors (tensors created
directly rather than by an op).  Calling :func:`backward` twice on the same
graph accumulates twice; call :meth:`Tensor.zero_grad` between steps.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a scalar (shape ``()``), or one shape is a suffix of
the other.  Anything else needs an explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

LOG_EPS = 1e-12

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------

def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the result of a custom differentiable op.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _binary_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: cannot combine shapes {a} and {b} (only scalar or trailing-dimension expansion)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor) -> dict:
    """Back-propagate from a scalar ``root``.

    Returns a mapping from each reachable leaf tensor with ``requires_grad``
    to its accumulated gradient (also stored on ``leaf.grad``).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        for p in node._parents:
            if p.requires_grad and id(p) not in nodes:
                stack.append(p)
    order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)

    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=node.dtype)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# ---------------------------------------------------------------------------
# non-linearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of silently zeroing it
    return make_op(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def sin(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return make_op(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def cos(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return make_op(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Guarded logarithm ``log(max(v, eps))``; zero gradient below ``eps``."""
    a = _lift(a)
    x = a.data
    safe = np.maximum(x, eps)
    live = x > eps
    return make_op(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0).astype(x.dtype),), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def clip(a, lo, hi) -> Tensor:
    """Clamp element-wise; the gradient is zero where the bound is active."""
    a = _lift(a)
    x = a.data
    lo = np.asarray(lo, dtype=x.dtype)
    hi = np.asarray(hi, dtype=x.dtype)
    inside = (x >= lo) & (x <= hi)
    return make_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_op(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return make_op(out, (a,), lambda g: (_expand_reduced(g / n, shape, axis, keepdims),), "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Both operands may carry identical leading batch axes, or ``b`` may be a
    plain matrix shared across all leading axes of ``a``.
    """
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2] or not (
            b.ndim == 2 or (a.ndim == b.ndim and sa[:-2] == sb[:-2])):
        raise ShapeError(f"matmul: shapes {sa} and {sb} are not conformable")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def getitem(a, key) -> Tensor:
    a = _lift(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return make_op(a.data[key], (a,), bw, "getitem")


def gather(a, index, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate gradient."""
    a = _lift(a)
    index = np.asarray(index)
    shape, dtype = a.shape, a.dtype
    axis = axis % a.ndim
    if index.size and (index.min() < -shape[axis] or index.max() >= shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {shape}")

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (out,)

    return make_op(np.take(a.data, index, axis=axis), (a,), bw, "gather")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return make_op(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as in ``np.pad``."""
    a = _lift(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[key],), "pad")


# ---------------------------------------------------------------------------
# dispatch by name
# ---------------------------------------------------------------------------

OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "sigmoid": sigmoid, "sin": sin, "cos": cos, "exp": exp,
    "sum": sum_, "mean": mean, "softmax": softmax, "log_softmax": log_softmax,
    "log": log, "gather": gather, "concat": concat, "sqrt": sqrt, "clip": clip,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    mu = mean(x, axis=-1, keepdims=True).broadcast_to(x.shape)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    inv = (1.0 / sqrt(var + eps)).broadcast_to(x.shape)
    return centered * inv * gain + bias
