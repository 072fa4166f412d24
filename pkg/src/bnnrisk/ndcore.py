"""Dense float64 arithmetic and a small reverse-mode differentiation tape.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64.  The tape
records every primitive applied to a :class:`Node` and replays the chain rule
backwards in :func:`gradient`.  Every primitive accepts raw arrays as well; when
none of its inputs is a ``Node`` it simply returns the numpy result, so the same
formula serves both the differentiable and the plain evaluation path.
"""

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "as_matrix",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "logaddexp",
    "total",
    "value_of",
    "gradient",
]

_SOFTPLUS_CUTOFF = 30.0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class Node:
    """A value recorded on the tape.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps the upstream
    gradient of this node to the gradient contribution for ``node``.
    """

    __slots__ = ("value", "parents", "name")

    def __init__(self, value, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _record(out, inputs_and_vjps):
    parents = [(x, vjp) for x, vjp in inputs_and_vjps if isinstance(x, Node)]
    if not parents:
        return out
    return Node(out, parents)


# -- primitives ---------------------------------------------------------------


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = av @ bv
    return _record(out, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _record(
        out,
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape))],
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _record(
        out,
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(-g, bv.shape))],
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _record(
        out,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
        ],
    )


def neg(a):
    return _record(-value_of(a), [(a, lambda g: -g)])


def square(a):
    av = value_of(a)
    return _record(av * av, [(a, lambda g: 2.0 * av * g)])


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, [(a, lambda g: g * out)])


def log(a):
    av = value_of(a)
    return _record(np.log(av), [(a, lambda g: g / av)])


def _sigmoid(x):
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    mid = np.clip(x, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF)
    return np.where(
        x > _SOFTPLUS_CUTOFF,
        x,
        np.where(x < -_SOFTPLUS_CUTOFF, np.exp(np.minimum(x, 0.0)), np.log1p(np.exp(mid))),
    )


def relu(a):
    av = value_of(a)
    return _record(np.maximum(av, 0.0), [(a, lambda g: g * (av > 0.0))])


def sigmoid(a):
    out = _sigmoid(value_of(a))
    return _record(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    av = value_of(a)
    return _record(_softplus(av), [(a, lambda g: g * _sigmoid(av))])


def log_sigmoid(a):
    """``log(sigmoid(a)) = -softplus(-a)``, finite for every finite input."""
    av = value_of(a)
    return _record(-_softplus(-av), [(a, lambda g: g * _sigmoid(-av))])


def logaddexp(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.logaddexp(av, bv)
    with np.errstate(invalid="ignore"):
        wa = np.exp(av - out)
        wb = np.exp(bv - out)
    wa = np.nan_to_num(wa)
    wb = np.nan_to_num(wb)
    return _record(
        out,
        [(a, lambda g: _unbroadcast(g * wa, av.shape)), (b, lambda g: _unbroadcast(g * wb, bv.shape))],
    )


def total(a):
    """Sum of all entries as a 0-d value."""
    av = value_of(a)
    return _record(np.asarray(av.sum()), [(a, lambda g: np.broadcast_to(g, av.shape).copy())])


# -- reverse pass -------------------------------------------------------------


def _topological_order(root):
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradient(loss, params):
    """Reverse-mode gradients of the scalar ``loss`` w.r.t. each of ``params``.

    Raises ``ValueError`` if the loss is not scalar or if a parameter was not
    recorded on the path to the loss.
    """
    if not isinstance(loss, Node):
        raise ValueError("loss is not a recorded tape value")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = _topological_order(loss)
    reachable = {id(n) for n in order}
    for p in params:
        if not isinstance(p, Node) or id(p) not in reachable:
            raise ValueError(f"parameter {p!r} is not recorded in the loss graph")

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [grads.get(id(p), np.zeros_like(p.value)).reshape(p.value.shape) for p in params]
