"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure mapping the output gradient to parent gradients. The
graph is rebuilt on each forward pass; :func:`backward` walks it in reverse
topological order. Elementwise binary ops broadcast with numpy rules so the
same code serves single samples and mini-batches.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "backward",
    "concat",
    "elementwise",
    "grad_check",
    "grad_check_many",
    "layer_norm",
    "matmul",
    "maximum",
    "minimum",
    "no_grad",
    "parameter",
    "softmax_rows",
    "softmax",
    "where",
    "zeros",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _op(data: np.ndarray, parents: tuple, fn: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- introspection --------------------------------------------------------
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
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- method aliases -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def abs(self):
        return absolute(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# -- binary elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._op(ad * bd, (a, b),
                      lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    return mul(a, reciprocal(as_tensor(b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._op(a.data * c, (a,), lambda g: (g * c,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data
    return Tensor._op(np.where(pick, a.data, b.data), (a, b),
                      lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data
    return Tensor._op(np.where(pick, a.data, b.data), (a, b),
                      lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._op(np.where(cond, a.data, b.data), (a, b),
                      lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)))


# -- unary elementwise --------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._op(np.log(x), (a,), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._op(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return Tensor._op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return Tensor._op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor._op(y, (a,), fn)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._op(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._op(a.data * mask, (a,), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor._op(np.abs(a.data), (a,), lambda g: (g * s,))


def reciprocal(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(x):
        bad = tuple(int(i) for i in np.argwhere(x == 0)[0])
        raise ZeroDivisionError(f"reciprocal of zero at index {bad}")
    y = 1.0 / x
    return Tensor._op(y, (a,), lambda g: (-g * y * y,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return Tensor._op(y, (a,), lambda g: (0.5 * g / y,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return Tensor._op(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


_UNARY = {
    "exp": exp,
    "softplus": softplus,
    "silu": silu,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "tanh": tanh,
    "relu": relu,
    "reciprocal": reciprocal,
    "log": log,
    "abs": absolute,
    "sqrt": sqrt,
}


def elementwise(op_kind: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``add`` and ``mul`` take two tensors of identical shape, ``scale`` takes a
    tensor and a python scalar, everything else is unary.
    """
    if op_kind in ("add", "mul"):
        a, b = (as_tensor(x) for x in args)
        if a.shape != b.shape:
            raise ShapeError(f"{op_kind}: operand shapes differ, {a.shape} vs {b.shape}")
        return add(a, b) if op_kind == "add" else mul(a, b)
    if op_kind == "scale":
        a, c = args
        return scale(as_tensor(a), c)
    try:
        fn = _UNARY[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    (a,) = args
    return fn(as_tensor(a))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        return ga, gb

    return Tensor._op(ad @ bd, (a, b), fn)


# -- reductions and shape manipulation ---------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._op(np.asarray(y), (a,), fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._op(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, src),))


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer)) for k in parts)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    shape = a.shape
    basic = _is_basic(key)

    def fn(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return Tensor._op(np.asarray(a.data[key]), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                      lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, np.expand_dims(t.data, axis).shape) for t in tensors]
    return concat(expanded, axis=axis)


# -- normalisation ------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (max-subtracted)."""
    return softmax(a, axis=-1)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``.

    A constant row has zero variance; the epsilon keeps the denominator
    positive, so the normalised row is exactly zero and the output is ``bias``.
    """
    d = a.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data

    def fn(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return Tensor._op(xhat * gd + bd, (a, gain, bias), fn)


# -- backward pass ------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from tensor to gradient. With ``inputs`` given, the map has
    exactly those keys, and tensors the loss does not depend on get zeros.
    Otherwise it holds every leaf that requires grad and was reached. Leaf
    ``.grad`` attributes are overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
                leaves[id(node)] = node
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if inputs is None:
        return {t: t.grad for t in leaves.values()}
    out = {}
    for t in inputs:
        out[t] = t.grad if id(t) in leaves else np.zeros(t.shape)
    return out


# -- finite-difference checking -----------------------------------------------

def grad_check_many(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` with central differences.

    ``tensors`` must be leaves that ``f`` reads; they are perturbed in place
    and restored. Returns max |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
    try:
        out = f()
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        analytic = backward(out, tensors)
        worst = 0.0
        with no_grad():
            for t in tensors:
                a = analytic[t]
                base = t.data.copy()
                for idx in np.ndindex(base.shape):
                    plus = base.copy()
                    plus[idx] += eps
                    t.data = plus
                    fp = f().item()
                    minus = base.copy()
                    minus[idx] -= eps
                    t.data = minus
                    fm = f().item()
                    t.data = base
                    num = (fp - fm) / (2 * eps)
                    worst = max(worst, abs(a[idx] - num) / max(1.0, abs(a[idx])))
    finally:
        for t, flag in zip(tensors, flags):
            t.requires_grad = flag
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences at ``x``."""
    probe = Tensor(np.array(as_tensor(x).data, dtype=np.float64), requires_grad=True)
    return grad_check_many(lambda: f(probe), [probe], eps)
