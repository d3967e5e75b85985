"""Minimal reverse-mode automatic differentiation over dense float32 arrays.

A `Tensor` wraps a numpy array plus an ordered list of parents and a backward
closure. Calling `backward()` on a scalar walks the tape in exact reverse
topological order, so gradient accumulation order (and therefore the float32
result) is reproducible bit for bit for a fixed graph.

Only the ops needed by this package are implemented: affine layers, the usual
pointwise nonlinearities, reductions, concatenation, fused classification
losses, and the custom gradient paths (straight-through quantization and
gradient reversal live in their own modules but follow the same pattern).
"""

import numpy as np

from .validation import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "gradients",
    "grad_check",
    "matmul",
    "concat",
    "gather_rows",
    "softmax_cross_entropy",
    "binary_cross_entropy_with_logits",
    "gradient_reversal",
]


def _as_array(value):
    return np.asarray(value, dtype=np.float32)


class Tensor:
    """Node in the computation graph: float32 value, gradient slot, parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, backward_fn):
    """Build an op node; the backward closure is dropped when nothing needs grad."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward_fn)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and linear ops ------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.data.shape))

    return _node(out_data, (a, b), back)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.data.shape))

    return _node(out_data, (a, b), back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.data.shape))

    return _node(out_data, (a, b), back)


def power(a, p):
    a = _wrap(a)
    p = float(p)
    out_data = a.data**p

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * p * a.data ** (p - 1))

    return _node(out_data, (a,), back)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    return _node(out_data, (a, b), back)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * (1.0 - out.data * out.data))

    return _node(out_data, (a,), back)


def relu(a):
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * (a.data > 0.0))

    return _node(out_data, (a,), back)


def sigmoid(a):
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data * (1.0 - out.data))

    return _node(out_data, (a,), back)


def texp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data)

    return _node(out_data, (a,), back)


def tsum(a, axis=None):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis)

    def back(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), back)


def tmean(a, axis=None):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def concat(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _node(out_data, tuple(tensors), back)


def gather_rows(a, indices):
    """out[i] = a[i, indices[i]] for a 2-D tensor; backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"gather_rows on shape {a.data.shape} with indices {idx.shape}")
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx]

    def back(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, idx), out.grad)
            a.accumulate_grad(g)

    return _node(out_data, (a,), back)


# -- fused losses ----------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits).

    Fused for numerical stability; gradient is (softmax - onehot) / batch.
    """
    logits = _wrap(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross-entropy on logits {logits.data.shape}, labels {y.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -(z[np.arange(n), y] - np.log(expz.sum(axis=1)))
    out_data = np.float32(nll.mean())

    def back(out):
        if logits.requires_grad:
            g = probs.copy()
            g[np.arange(n), y] -= 1.0
            logits.accumulate_grad(out.grad * g / n)

    return _node(out_data, (logits,), back)


def binary_cross_entropy_with_logits(logits, targets):
    """Mean binary cross-entropy over arbitrary-shape logits and 0/1 targets."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.float32)
    if t.shape != logits.data.shape:
        raise ShapeError(f"BCE shapes {logits.data.shape} vs {t.shape}")
    x = logits.data
    # log(1 + exp(-|x|)) + max(x, 0) - x*t, the stable form
    loss = np.logaddexp(0.0, -np.abs(x)) + np.maximum(x, 0.0) - x * t
    n = x.size
    out_data = np.float32(loss.mean())

    def back(out):
        if logits.requires_grad:
            p = 1.0 / (1.0 + np.exp(-x))
            logits.accumulate_grad(out.grad * (p - t) / n)

    return _node(out_data, (logits,), back)


def gradient_reversal(a, beta=1.0):
    """Identity forward; backward multiplies the incoming gradient by -beta."""
    if beta < 0:
        raise ContractError("gradient reversal coefficient must be >= 0")
    a = _wrap(a)
    out_data = a.data.copy()

    def back(out):
        if a.requires_grad:
            a.accumulate_grad(-beta * out.grad)

    return _node(out_data, (a,), back)


# -- backward pass and checking ---------------------------------------------


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate gradients from a scalar loss; leaves end up with `.grad` set."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
            if node is not loss:
                node.grad = None  # interior grads freed once propagated


def gradients(loss, params):
    """Backward pass returning {name: gradient array}; unreached params get zeros."""
    named = dict(params)
    if loss.data.size != 1:
        raise ContractError(f"gradients requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    for t in named.values():
        t.grad = None  # a param may be absent from this graph; stale grads must not leak
    if loss.requires_grad:
        order = _toposort(loss)
        for node in order:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        keep = {id(t) for t in named.values()}
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node)
                if node is not loss and id(node) not in keep:
                    node.grad = None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in named.items()
    }


def grad_check(loss_fn, params, h=1e-3, tolerance=1e-3):
    """Compare analytic gradients of `loss_fn()` against central differences.

    Returns {name: (max_rel_err, passed)}; frozen (requires_grad=False)
    parameters are reported as (0.0, True) without probing. The relative
    error is |a - n| / max(|a| + |n|, 1), i.e. absolute near zero.
    """
    if tolerance <= 0:
        raise ContractError("tolerance must be positive")
    named = dict(params)
    analytic = gradients(loss_fn(), {k: v for k, v in named.items() if v.requires_grad})
    report = {}
    for name, p in named.items():
        if not p.requires_grad:
            report[name] = (0.0, True)
            continue
        a = analytic[name]
        numeric = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        rel = np.abs(a.astype(np.float64) - numeric) / np.maximum(
            np.abs(a) + np.abs(numeric), 1.0
        )
        err = float(rel.max()) if rel.size else 0.0
        report[name] = (err, err <= tolerance)
    return report
