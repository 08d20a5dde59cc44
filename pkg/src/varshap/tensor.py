"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When gradient recording is
enabled and any input requires a gradient, the result keeps a reference to
its inputs together with one vector-Jacobian product per input. Calling
:func:`backward` on a scalar walks that record in reverse topological order.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context in which no graph is recorded (thread-local)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "op")
    __array_ufunc__ = None  # ndarray (op) Tensor dispatches to Tensor

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in {op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, params=None, retain_graph=False):
        backward(self, params=params, retain_graph=retain_graph)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, pairs):
    """Wrap ``data`` as the output of ``op``; ``pairs`` holds (input, vjp)."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled():
        parents = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    else:
        parents = ()
    out._parents = parents
    out.requires_grad = bool(parents)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, "add", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, "mul", (
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero in div")
    out = a.data / b.data
    return _result(out, "div", (
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
    ))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: expected 1-D or 2-D operands, got {a.shape} and {b.shape}")
    a2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_a(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape)

    def grad_b(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (a2.T @ g2).reshape(b.shape)

    return _result(np.asarray(out, dtype=np.float64), "matmul", ((a, grad_a), (b, grad_b)))


# -- elementwise unary -----------------------------------------------------

def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, "exp", ((x, lambda g: g * out),))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive input")
    return _result(np.log(x.data), "log", ((x, lambda g: g / x.data),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, "tanh", ((x, lambda g: g * (1.0 - out * out)),))


def stable_sigmoid(v):
    """Branch-wise logistic function on a plain array."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = stable_sigmoid(x.data)
    return _result(out, "sigmoid", ((x, lambda g: g * out * (1.0 - out)),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _result(out, "softmax", ((x, grad),))


def square(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = x.data * x.data
    return _result(out, "square", ((x, lambda g: 2.0 * g * x.data),))


def abs_(x):
    x = as_tensor(x)
    return _result(np.abs(x.data), "abs", ((x, lambda g: g * np.sign(x.data)),))


def maximum(x, floor):
    """Elementwise max against a constant floor; gradient flows where x wins."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor), "maximum", ((x, lambda g: g * keep),))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), "clip", ((x, lambda g: g * inside),))


# -- reductions and shape ops ----------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _result(out, "sum", ((x, lambda g: _expand(g, x.shape, axis, keepdims).copy()),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _result(out, "mean", ((x, lambda g: _expand(g, x.shape, axis, keepdims) / n),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    pairs = []
    for i, t in enumerate(tensors):
        def grad(g, i=i):
            return np.split(g, bounds, axis=axis)[i]
        pairs.append((t, grad))
    return _result(out, "concat", pairs)


def slice_(x, index):
    x = as_tensor(x)
    out = x.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()
    else:
        out = np.asarray(out, dtype=np.float64)

    def grad(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return full

    return _result(out, "slice", ((x, grad),))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _result(out.copy(), "reshape", ((x, lambda g: g.reshape(x.shape)),))


# -- differentiation -------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(root, keep=None):
    """Adjoints of every node reachable from ``root``; ``keep`` prunes the walk."""
    order = _topo_order(root)
    adj = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None:
            continue
        if not node._parents:
            leaves.append((node, g))
            continue
        for parent, fn in node._parents:
            if keep is not None and id(parent) not in keep:
                continue
            pg = fn(g)
            prev = adj.get(id(parent))
            adj[id(parent)] = pg if prev is None else prev + pg
    return order, adj, leaves


def _free(order):
    for node in order:
        node._parents = ()


def backward(loss, params=None, retain_graph=False):
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Grads are overwritten, not accumulated. Leaves listed in ``params`` that the
    loss does not reach receive a zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    order, _, leaves = _propagate(loss)
    for leaf, g in leaves:
        if leaf.requires_grad:
            leaf.grad = np.array(g, dtype=np.float64)
    if not retain_graph:
        _free(order)


def grad(output, wrt):
    """Return d(output)/d(w) for each ``w`` in ``wrt`` without touching ``.grad``."""
    if output.size != 1:
        raise UsageError(f"grad needs a scalar output, got shape {output.shape}")
    targets = {id(w) for w in wrt}
    if not output.requires_grad:
        return [np.zeros_like(w.data) for w in wrt]
    order = _topo_order(output)
    keep = set()
    for node in order:  # parents precede children
        if id(node) in targets or any(id(p) in keep for p, _ in node._parents):
            keep.add(id(node))
    _, adj, _ = _propagate(output, keep=keep)
    out = []
    for w in wrt:
        g = adj.get(id(w))
        out.append(np.zeros_like(w.data) if g is None else np.array(g, dtype=np.float64))
    return out


def gradient_of(f, at):
    """Gradient of scalar-valued ``f`` at ``at``, computed on a private graph."""
    point = Tensor(as_tensor(at).data, requires_grad=True)
    with enable_grad():
        value = f(point)
        if not isinstance(value, Tensor) or value.size != 1:
            raise UsageError("gradient_of expects f to return a scalar Tensor")
        (g,) = grad(value, [point])
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return Tensor(g)
