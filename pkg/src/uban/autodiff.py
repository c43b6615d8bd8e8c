"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every op records its parents and a backward closure on the
output tensor, so the graph is rebuilt on each forward pass.  Backward is a
deterministic topological sweep, which makes gradients bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteLoss",
    "add", "sub", "neg", "mul", "div", "matmul", "concat", "slice_",
    "gather_rows", "reshape", "tensor_sum", "tensor_mean", "reduce_max",
    "reduce_min", "exp", "log", "sigmoid", "tanh", "softplus", "square",
    "clip", "softmax", "log_softmax", "scale_by_scalar_node",
    "forward_op", "backward", "grad_check",
]


class ShapeMismatch(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NonFiniteLoss(ValueError):
    """Raised when a gradient-check probe produces a non-finite loss."""


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    # convenience operators
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(data, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(parents),
                  _backward=backward_fn if requires else None, op=op)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out_data, (a, b), back, "add")


def neg(a):
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), back, "neg")


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(out_data, (a, b), back, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out_data = a.data / b.data

    def back(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(out_data, (a, b), back, "div")


def scale_by_scalar_node(a, s):
    """Divide a tensor by a (possibly learned) positive scalar node."""
    return div(a, s)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), back, "matmul")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tensors, back, "concat")


def slice_(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _make(out_data, (a,), back, "slice")


def gather_rows(a, indices):
    """Select rows of a 2-D tensor; duplicate indices accumulate gradients."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(out_data, (a,), back, "gather_rows")


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), back, "reshape")


# ---------------------------------------------------------------------------
# reductions

def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, 1.0) * g)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g_exp, a.data.shape))

    return _make(out_data, (a,), back, "sum")


def tensor_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _reduce_extreme(a, axis, keepdims, argfn, name):
    a = _as_tensor(a)
    if axis is None:
        flat_idx = argfn(a.data.reshape(-1))
        out_data = a.data.reshape(-1)[flat_idx]

        def back(g):
            full = np.zeros_like(a.data).reshape(-1)
            full[flat_idx] = g
            _accumulate(a, full.reshape(a.data.shape))

        return _make(out_data, (a,), back, name)

    idx = argfn(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def back(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g_exp, axis=axis)
        _accumulate(a, full)

    return _make(out_data, (a,), back, name)


def reduce_max(a, axis=None, keepdims=False):
    # ties resolve to the first occurrence, matching np.argmax
    return _reduce_extreme(a, axis, keepdims, np.argmax, "max")


def reduce_min(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, np.argmin, "min")


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), back, "exp")


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), back, "log")


def sigmoid(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates to exactly 0
        out_data = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back, "tanh")


def softplus(a):
    """log(1 + e^x), computed without overflow for large |x|."""
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def back(g):
        with np.errstate(over="ignore"):
            _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), back, "softplus")


def square(a):
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), back, "square")


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes through the interior."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), back, "clip")


def softmax(a, axis=-1):
    """Numerically stable softmax (subtracts the per-row max)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def back(g):
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), back, "log_softmax")


# ---------------------------------------------------------------------------
# dispatch, backward, gradient checking

_OP_TABLE = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_axis": softmax,
    "scale_by_scalar_node": scale_by_scalar_node,
    "square": square,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by name; unknown kinds are rejected."""
    if kind not in _OP_TABLE:
        raise ValueError(f"unknown op kind {kind!r}")
    return _OP_TABLE[kind](*inputs, **kwargs)


def _topo_order(root):
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Propagate gradients from a scalar root to every requires_grad leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def grad_check(loss_fn, tensors, step=1e-6, wrt=None):
    """Compare analytic gradients against central finite differences.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = loss_fn(*tensors)
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is non-finite at the probe point")
    backward(loss)
    checked = tensors if wrt is None else list(wrt)
    analytic = []
    for t in checked:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        analytic.append(t.grad.copy())

    max_err = 0.0
    for t, a_grad in zip(checked, analytic):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(loss_fn(*tensors).data)
            flat[i] = orig - step
            f_minus = float(loss_fn(*tensors).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteLoss(
                    f"non-finite loss while probing coordinate {i} of {t!r}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            if err > max_err:
                max_err = err
    return max_err
