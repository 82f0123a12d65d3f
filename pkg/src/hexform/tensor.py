"""Dense float64 tensors with a reverse-mode tape.

Ops are module-level functions; the operators on :class:`Tensor` forward to
them. Any argument whose type defines ``__he_op__`` takes over the op, which
is how a single model definition runs on plaintext and on ciphertext.

Every op records the arithmetic primitives it uses into the active
:func:`op_trace`, and every result keeps a reference to its parents so the
computation DAG can be walked after the fact (see :mod:`hexform.dag`).
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import Counter

import numpy as np

from .errors import NonFiniteValue, NotScalarLoss, ShapeMismatch, UnsupportedOp

_TRACE = contextvars.ContextVar("hexform_trace", default=None)
_SCOPE = contextvars.ContextVar("hexform_scope", default=())
_BLAS = contextvars.ContextVar("hexform_blas", default=False)

HE_PRIMITIVES = frozenset({"add", "mul", "relu"})


class OpTrace:
    """Primitive counts collected while the trace is active."""

    def __init__(self):
        self.counts = Counter()
        self.first_site = {}

    def record(self, prims):
        site = current_scope()
        for p in prims:
            self.counts[p] += 1
            self.first_site.setdefault(p, site)

    @property
    def primitives(self):
        return set(self.counts)

    def illegal(self, allowed=HE_PRIMITIVES):
        return {p: self.first_site[p] for p in self.counts if p not in allowed}


@contextlib.contextmanager
def op_trace():
    tr = OpTrace()
    token = _TRACE.set(tr)
    try:
        yield tr
    finally:
        _TRACE.reset(token)


@contextlib.contextmanager
def scope(name):
    token = _SCOPE.set(_SCOPE.get() + (str(name),))
    try:
        yield
    finally:
        _SCOPE.reset(token)


def current_scope():
    return ".".join(_SCOPE.get())


@contextlib.contextmanager
def blas_matmul():
    """Use BLAS for matmul forwards. Training only: results are no longer
    bit-identical to the element-wise lowering used on ciphertext."""
    token = _BLAS.set(True)
    try:
        yield
    finally:
        _BLAS.reset(token)


def _record(*prims):
    tr = _TRACE.get()
    if tr is not None:
        tr.record(prims)


def is_cipher(x):
    return hasattr(type(x), "__he_op__")


def _dispatch(name, *args, **kwargs):
    for a in args:
        if is_cipher(a):
            return a.__he_op__(name, *args, **kwargs)
    return NotImplemented


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self._backward = None

    @classmethod
    def _make(cls, data, parents, op, backward):
        if not np.isfinite(data).all():
            raise NonFiniteValue(f"{op} produced non-finite values at {current_scope() or '<top>'}")
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        t.op = op
        t.parents = parents
        t._backward = backward if t.requires_grad else None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a1, a2):
        return swapaxes(self, a1, a2)

    def backward(self):
        backward(self)


def lift(x):
    if isinstance(x, Tensor):
        return x
    t = Tensor(x)
    t.op = "const"
    return t


def _bshape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    _record("add")
    r = _dispatch("add", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    _bshape(a, b)
    return Tensor._make(
        a.data + b.data, (a, b), "add",
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    _record("add")
    r = _dispatch("sub", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    _bshape(a, b)
    return Tensor._make(
        a.data - b.data, (a, b), "sub",
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    _record("mul")
    r = _dispatch("mul", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    _bshape(a, b)
    return Tensor._make(
        a.data * b.data, (a, b), "mul",
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    _record("div")
    r = _dispatch("div", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    _bshape(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._make(out, (a, b), "div", back)


def relu(x):
    _record("relu")
    r = _dispatch("relu", x)
    if r is not NotImplemented:
        return r
    x = lift(x)
    mask = x.data > 0
    # subgradient at exactly zero is zero
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def exp(x):
    _record("exp")
    r = _dispatch("exp", x)
    if r is not NotImplemented:
        return r
    x = lift(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._make(out, (x,), "exp", lambda g: (g * out,))


def tanh(x):
    _record("tanh")
    r = _dispatch("tanh", x)
    if r is not NotImplemented:
        return r
    x = lift(x)
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sqrt(x):
    _record("sqrt")
    r = _dispatch("sqrt", x)
    if r is not NotImplemented:
        return r
    x = lift(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return Tensor._make(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def maximum(a, b):
    _record("max")
    r = _dispatch("max", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    _bshape(a, b)
    pick = a.data >= b.data
    return Tensor._make(
        np.where(pick, a.data, b.data), (a, b), "max",
        lambda g: (unbroadcast(g * pick, a.shape), unbroadcast(g * ~pick, b.shape)),
    )


# -- reductions and layout -----------------------------------------------------


def _expand_grad(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def ordered_sum(a, axis=None, keepdims=False):
    """Left-to-right sum along ``axis``. Unlike ``np.sum`` (pairwise on
    contiguous axes only) the rounding does not depend on memory layout, so
    plaintext and ciphertext evaluations round identically."""
    a = np.asarray(a)
    if axis is None:
        out = np.cumsum(a.reshape(-1))[-1] if a.size else a.dtype.type(0)
        return np.full((1,) * a.ndim, out, dtype=a.dtype) if keepdims else out
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = np.take(np.cumsum(a, axis=axis), [-1], axis=axis)
    return out if keepdims else np.squeeze(out, axis)


def sum_(x, axis=None, keepdims=False):
    _record("add")
    r = _dispatch("sum", x, axis=axis, keepdims=keepdims)
    if r is not NotImplemented:
        return r
    x = lift(x)
    out = ordered_sum(x.data, axis, keepdims)
    return Tensor._make(
        np.asarray(out, dtype=np.float64), (x,), "sum",
        lambda g: (_expand_grad(g, x.shape, axis, keepdims),),
    )


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    r = _dispatch("reshape", x, shape)
    if r is not NotImplemented:
        return r
    x = lift(x)
    return Tensor._make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1, a2):
    r = _dispatch("swapaxes", x, a1, a2)
    if r is not NotImplemented:
        return r
    x = lift(x)
    return Tensor._make(np.swapaxes(x.data, a1, a2), (x,), "swapaxes", lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, idx):
    r = _dispatch("getitem", x, idx)
    if r is not NotImplemented:
        return r
    x = lift(x)

    def back(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor._make(np.array(x.data[idx]), (x,), "getitem", back)


def take_rows(table, ids):
    """Row lookup ``table[ids]``; a table read, so it records no arithmetic."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return Tensor._make(table.data[ids], (table,), "gather", back)


# -- matmul --------------------------------------------------------------------


def lowered_matmul(a, b):
    """``a @ b`` as a sum of rank-one products, accumulated in index order.

    This is the element-wise form evaluated on ciphertext. Works for float and
    object (big-integer) arrays with any leading batch dims.
    """
    k = a.shape[-1]
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for j in range(1, k):
        out += a[..., :, j:j + 1] * b[..., j:j + 1, :]
    return out


def matmul(a, b):
    _record("mul", "add")
    r = _dispatch("matmul", a, b)
    if r is not NotImplemented:
        return r
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims {a.shape} @ {b.shape}") from None
    flat = b.ndim == 2 and a.ndim > 2
    if not _BLAS.get():
        out = lowered_matmul(a.data, b.data)
    elif flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def back(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), "matmul", back)


# -- composite activations -------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-form GELU. Plaintext only."""
    if is_cipher(x):
        raise UnsupportedOp("tanh")
    inner = mul(add(x, mul(mul(mul(x, x), x), 0.044715)), _GELU_C)
    return mul(mul(x, 0.5), add(tanh(inner), 1.0))


def softmax_exact(x, axis=-1):
    if is_cipher(x):
        raise UnsupportedOp("exp")
    x = lift(x)
    _record("max")
    # the shift cancels in the ratio, so it is treated as a constant
    shifted = sub(x, np.max(x.data, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


# -- losses (plaintext training only) ------------------------------------------------


def cross_entropy(logits, labels, weights=None):
    """Mean negative log-likelihood over the leading dims of ``logits``.

    ``weights`` (same shape as ``labels``) masks out positions such as padding.
    """
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = max(w.sum(), 1.0)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / denom

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / denom)[..., None],)

    return Tensor._make(np.asarray(loss), (logits,), "cross_entropy", back)


def mse_loss(pred, target):
    d = sub(pred, target)
    return mean(mul(d, d))


# -- reverse pass -----------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg
