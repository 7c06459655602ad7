"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each operation records its inputs and an adjoint closure on
the output tensor, so the graph exists only as long as its outputs do and is
rebuilt on every forward pass.  Everything is float64; gradient checking at
1e-5 relative tolerance is not reliable in single precision.

Broadcasting is deliberately limited to scalar-with-tensor.  Row-wise bias
adds and similar patterns are expressed with explicit matmuls against
constant matrices (see ``linear`` in the model modules).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, a, b=None):
        detail = f"{op}: got {tuple(a)}" if b is None else f"{op}: got {tuple(a)} and {tuple(b)}"
        super().__init__(detail)


class DomainError(ValueError):
    """Input outside the numeric domain of the operation (e.g. non-finite)."""


class GraphError(ValueError):
    """Misuse of the differentiation graph (e.g. backward on a non-scalar)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-time forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable-by-convention dense array plus an optional graph record.

    ``data`` must not be mutated after construction except by the optimizer,
    which only touches leaf parameters between graph lifetimes.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def softmax(self):
        return softmax(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def l2_norm(self):
        return l2_norm(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def gather_rows(self, indices):
        return gather_rows(self, indices)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, False, (), None, op)


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    cur = grads.get(key)
    grads[key] = g if cur is None else cur + g


def _is_scalar_shape(shape) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if _is_scalar_shape(a.shape) or _is_scalar_shape(b.shape):
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # adjoint of scalar broadcast: collapse back to the scalar operand
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g, a.shape))
        _accumulate(grads, b, _reduce_to(g, b.shape))

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g, a.shape))
        _accumulate(grads, b, _reduce_to(-g, b.shape))

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(_wrap(a), float(b))
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(_wrap(b), float(a))
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g * b_data, a.shape))
        _accumulate(grads, b, _reduce_to(g * a_data, b.shape))

    return _node(out, (a, b), backward, "mul")


def scale(t: Tensor, c: float) -> Tensor:
    t = _wrap(t)
    c = float(c)

    def backward(g, grads):
        _accumulate(grads, t, g * c)

    return _node(t.data * c, (t,), backward, "scale")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g, grads):
        _accumulate(grads, a, g @ b_data.T)
        _accumulate(grads, b, a_data.T @ g)

    return _node(out, (a, b), backward, "matmul")


def transpose(t: Tensor) -> Tensor:
    t = _wrap(t)
    if t.data.ndim != 2:
        raise ShapeMismatch("transpose", t.shape)

    def backward(g, grads):
        _accumulate(grads, t, g.T)

    return _node(t.data.T.copy(), (t,), backward, "transpose")


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_last", ())
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead or p.data.ndim != parts[0].data.ndim:
            raise ShapeMismatch("concat_last", parts[0].shape, p.shape)
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum(widths)[:-1]

    def backward(g, grads):
        for p, piece in zip(parts, np.split(g, offsets, axis=-1)):
            _accumulate(grads, p, piece)

    return _node(out, tuple(parts), backward, "concat_last")


def reduce_sum(t: Tensor, axis=None) -> Tensor:
    t = _wrap(t)
    out = t.data.sum(axis=axis)
    shape = t.shape

    def backward(g, grads):
        if axis is None:
            _accumulate(grads, t, np.broadcast_to(g, shape).copy())
        else:
            _accumulate(grads, t, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

    return _node(out, (t,), backward, "sum")


def reduce_mean(t: Tensor, axis=None) -> Tensor:
    t = _wrap(t)
    out = t.data.mean(axis=axis)
    shape = t.shape
    n = t.data.size if axis is None else shape[axis]

    def backward(g, grads):
        if axis is None:
            _accumulate(grads, t, np.broadcast_to(g / n, shape).copy())
        else:
            _accumulate(grads, t, np.broadcast_to(np.expand_dims(g / n, axis), shape).copy())

    return _node(out, (t,), backward, "mean")


def relu(t: Tensor) -> Tensor:
    t = _wrap(t)
    mask = t.data > 0
    out = np.where(mask, t.data, 0.0)

    def backward(g, grads):
        _accumulate(grads, t, g * mask)

    return _node(out, (t,), backward, "relu")


def tanh(t: Tensor) -> Tensor:
    t = _wrap(t)
    out = np.tanh(t.data)

    def backward(g, grads):
        _accumulate(grads, t, g * (1.0 - out * out))

    return _node(out, (t,), backward, "tanh")


def softmax(t: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    t = _wrap(t)
    if not np.isfinite(t.data).all():
        raise DomainError("softmax: non-finite input")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g, grads):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(grads, t, out * (g - inner))

    return _node(out, (t,), backward, "softmax")


def log(t: Tensor) -> Tensor:
    t = _wrap(t)
    if not np.isfinite(t.data).all():
        raise DomainError("log: non-finite input")
    out = np.log(t.data)
    data = t.data

    def backward(g, grads):
        _accumulate(grads, t, g / data)

    return _node(out, (t,), backward, "log")


def exp(t: Tensor) -> Tensor:
    t = _wrap(t)
    out = np.exp(t.data)

    def backward(g, grads):
        _accumulate(grads, t, g * out)

    return _node(out, (t,), backward, "exp")


def square(t: Tensor) -> Tensor:
    t = _wrap(t)
    data = t.data

    def backward(g, grads):
        _accumulate(grads, t, g * (2.0 * data))

    return _node(data * data, (t,), backward, "square")


def l2_norm(t: Tensor) -> Tensor:
    """Euclidean norm along the last axis; the output drops that axis."""
    t = _wrap(t)
    out = np.sqrt((t.data * t.data).sum(axis=-1))
    data = t.data
    # zero rows get a zero (sub)gradient instead of 0/0
    safe = np.where(out > 0.0, out, 1.0)

    def backward(g, grads):
        _accumulate(grads, t, np.expand_dims(g / safe, -1) * data)

    return _node(out, (t,), backward, "l2_norm")


def gather_rows(t: Tensor, indices) -> Tensor:
    t = _wrap(t)
    if t.data.ndim != 2:
        raise ShapeMismatch("gather_rows", t.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise DomainError(f"gather_rows: index out of range for {t.shape[0]} rows")
    out = t.data[idx]
    shape = t.shape

    def backward(g, grads):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        _accumulate(grads, t, buf)

    return _node(out, (t,), backward, "gather_rows")


def reshape(t: Tensor, shape) -> Tensor:
    t = _wrap(t)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != t.data.size:
        raise ShapeMismatch("reshape", t.shape, shape)
    old = t.shape

    def backward(g, grads):
        _accumulate(grads, t, g.reshape(old))

    return _node(t.data.reshape(shape), (t,), backward, "reshape")


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns ``{tensor: gradient}`` for every requires_grad tensor reachable
    from ``loss``; any tensor in ``leaves`` that the sweep did not reach is
    mapped to zeros of its shape.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)

    result: dict[Tensor, np.ndarray] = {}
    for node in topo:
        if node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                result[node] = g
    for leaf in leaves:
        if leaf not in result:
            result[leaf] = np.zeros_like(leaf.data)
    return result


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def graph_size(*outputs: Tensor) -> int:
    """Number of distinct tensors reachable from the given outputs."""
    seen: set[int] = set()
    stack = list(outputs)
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._parents)
    return len(seen)
