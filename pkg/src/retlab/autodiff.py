"""Reverse-mode automatic differentiation over float64 numpy arrays.

The computation graph is the linked structure of :class:`Tensor` nodes:
each op records its parent nodes and a vector-Jacobian closure, so nodes
are created in topological order by construction. ``backward`` walks the
graph in reverse topological order from a single scalar root and
accumulates (sums) gradients, which makes reused subexpressions and
reused leaves come out right. Gradients are retained on every visited
node, so intermediate feature maps can be queried after the fact.

A central finite-difference oracle and a gradient checker live here too;
every differentiable block in the model package is validated against
them.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "leaf",
    "constant",
    "no_grad",
    "backward",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negative",
    "power",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "swish",
    "gelu_tanh",
    "clip",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "concat",
    "narrow",
    "take_last",
    "repeat_axis",
    "finite_difference_gradient",
    "compare_gradients",
    "gradient_check",
    "GradientCheckReport",
]


class GraphError(ValueError):
    """Contract violation on the computation graph (e.g. non-scalar root)."""


_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "retlab_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain constant tensors."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """Dense float64 array plus its position in the computation graph.

    ``value`` is row-major float64 data; ``shape`` is ``value.shape``.
    Leaves flag trainable parameters (or gradient-check inputs); nodes
    with parents are derived. Values are treated as immutable once
    wrapped.
    """

    __slots__ = ("value", "grad", "leaf", "name", "_parents", "_vjp")

    def __init__(self, value, *, leaf: bool = False, name: str | None = None,
                 _parents: tuple = (), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.leaf = leaf
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def _tracked(self) -> bool:
        return self.leaf or bool(self._parents)

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if self.leaf else "node")
        return f"Tensor({tag}, shape={self.value.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def leaf(value, name: str | None = None) -> Tensor:
    """Trainable/differentiable graph input."""
    return Tensor(value, leaf=True, name=name)


def constant(value, name: str | None = None) -> Tensor:
    """Non-differentiable graph input (data, lookup tables)."""
    return Tensor(value, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED.get() and any(t._tracked for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value
    if not _tracking(a, b):
        return Tensor(out)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value - b.value
    if not _tracking(a, b):
        return Tensor(out)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value * b.value
    if not _tracking(a, b):
        return Tensor(out)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value / b.value
    if not _tracking(a, b):
        return Tensor(out)

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def negative(a) -> Tensor:
    a = _as_tensor(a)
    if not _tracking(a):
        return Tensor(-a.value)
    return Tensor(-a.value, _parents=(a,), _vjp=lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    out = a.value ** p
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * p * a.value ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.value)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.value)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.value)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.value, 0.0)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * (a.value > 0.0),))


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid_np(a.value)
    out = a.value * s
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * (s + a.value * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_tanh(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.value
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    if not _tracking(a):
        return Tensor(out)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside (lo, hi)."""
    a = _as_tensor(a)
    out = np.clip(a.value, lo, hi)
    if not _tracking(a):
        return Tensor(out)
    inside = (a.value > lo) & (a.value < hi)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * inside,))


def matmul(a, b) -> Tensor:
    """numpy matmul semantics for stacks of matrices (both operands >= 2-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise GraphError("matmul operands must be at least 2-D")
    out = a.value @ b.value
    if not _tracking(a, b):
        return Tensor(out)

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def transpose(a, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.value, axes)
    if not _tracking(a):
        return Tensor(out)
    inv = tuple(np.argsort(axes))
    return Tensor(out, _parents=(a,), _vjp=lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.value.reshape(shape)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g.reshape(a.value.shape),))


def _expand_reduced(g: np.ndarray, source_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, source_shape)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % len(source_shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, source_shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,),
                  _vjp=lambda g: (_expand_reduced(g, a.value.shape, axis, keepdims).copy(),))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size / max(out.size, 1)
    if not _tracking(a):
        return Tensor(out)
    return Tensor(out, _parents=(a,),
                  _vjp=lambda g: (_expand_reduced(g, a.value.shape, axis, keepdims) / count,))


def softmax(v, axis: int = -1) -> Tensor:
    """Row-stable softmax along `axis` (max-subtraction before exp)."""
    v = _as_tensor(v)
    if v.value.ndim == 0 or v.value.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    shifted = v.value - v.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    if not _tracking(v):
        return Tensor(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor(s, _parents=(v,), _vjp=vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    if not _tracking(*tensors):
        return Tensor(out)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _vjp=vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    ax = axis % a.value.ndim
    index = (slice(None),) * ax + (slice(start, start + length),)
    out = a.value[index]
    if not _tracking(a):
        return Tensor(out)

    def vjp(g):
        z = np.zeros_like(a.value)
        z[index] = g
        return (z,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def take_last(a, idx) -> Tensor:
    """Fancy-index the last axis with a fixed integer array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[..., idx]
    if not _tracking(a):
        return Tensor(out)

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, (Ellipsis, idx), g)
        return (z,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def repeat_axis(a, repeats: int, axis: int) -> Tensor:
    """np.repeat along one axis (each slice repeated `repeats` times)."""
    a = _as_tensor(a)
    out = np.repeat(a.value, repeats, axis=axis)
    if not _tracking(a):
        return Tensor(out)
    ax = axis % a.value.ndim

    def vjp(g):
        shape = list(a.value.shape)
        g2 = g.reshape(shape[:ax] + [shape[ax], repeats] + shape[ax + 1:])
        return (g2.sum(axis=ax + 1),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves=None) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate gradients of a scalar root.

    Returns a map from each reachable leaf tensor to dRoot/dLeaf.
    Leaves passed explicitly but not connected to the root get zero
    gradients. After the call every visited node carries `.grad`, so
    intermediate activations can be inspected as well.
    """
    if root.value.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    grads = {node: node.grad for node in order if node.leaf and node.grad is not None}
    if leaves is not None:
        for lf in leaves:
            grads.setdefault(lf, np.zeros_like(lf.value))
    return grads


# ---------------------------------------------------------------------------
# finite-difference oracle and gradient checking
# ---------------------------------------------------------------------------


def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central difference (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.

    `f` receives the (temporarily perturbed) numpy array and must return a
    scalar. The input array is restored before returning.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradientCheckReport:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    failed_coordinates: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed_coordinates


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float) -> GradientCheckReport:
    """Per-coordinate relative error with max(|a|, |b|, 1e-8) denominator."""
    if rel_tol <= 0:
        raise ValueError("relative tolerance must be positive")
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    rel = np.abs(a - n) / denom
    failed = [int(i) for i in np.nonzero(rel > rel_tol)[0]]
    max_err = float(rel.max()) if rel.size else 0.0
    return GradientCheckReport(max_err, np.asarray(analytic), np.asarray(numeric), failed)


def gradient_check(f, x, rel_tol: float = 1e-4, h: float = 1e-5) -> GradientCheckReport:
    """Check backward() against the finite-difference oracle.

    `f` maps a Tensor to a scalar Tensor; it is evaluated once on the
    graph for the analytic gradient and 2*size(x) times (without graph
    recording) for the numeric one. Failures are reported, not raised.
    """
    x0 = np.array(x, dtype=np.float64)
    x_leaf = leaf(x0)
    out = f(x_leaf)
    grads = backward(out, leaves=[x_leaf])
    analytic = grads[x_leaf]

    def value_fn(arr):
        with no_grad():
            return float(f(Tensor(arr)).value)

    numeric = finite_difference_gradient(value_fn, x0, h=h)
    return compare_gradients(analytic, numeric, rel_tol)
