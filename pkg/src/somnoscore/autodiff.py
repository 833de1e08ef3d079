"""Dense-tensor numerics with recorded-operation reverse-mode gradients.

Every forward op returns a new :class:`Tensor` holding its output, the
parent nodes it was computed from, and a closure implementing the
backward rule. ``backward(loss)`` walks the recorded graph in reverse
topological order and accumulates gradients (summed over all paths)
into every reachable leaf that has ``requires_grad`` set. Leaves
without ``requires_grad`` receive no gradient storage.

Arrays are float32 for training and float64 for gradient-check builds;
ops preserve the dtype of their inputs. Everything is plain single
threaded numpy, so identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NonScalarLoss, ShapeMismatch

# Python floats: a NumPy scalar here would promote float32 activations
# to float64 across every GELU call.
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return sum_all(self)

    def mean(self, axis):
        return mean(self, axis)


def _node(data, op, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after a broadcasting forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, "mul", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _node(a.data * s, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _reduce_batch(ga, a.data.shape))
        _accumulate(b, _reduce_batch(gb, b.data.shape))

    return _node(out_data, "matmul", (a, b), backward)


def _reduce_batch(g: np.ndarray, shape) -> np.ndarray:
    """Sum matmul leading (batch) dims that were broadcast in the forward."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape[:-2]):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeMismatch(f"transpose needs >=2-d input, got {a.shape}")

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return _node(a.data.reshape(shape), "reshape", (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(out_data, "concat", tuple(tensors), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _node(s, "softmax_rows", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = np.square(x.data - mu).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        dx = istd * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _node(out_data, "layer_norm", (x, gain, bias), backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column (axis -2) to zero mean / unit variance.

    Non-affine; a constant column maps to all zeros because the
    epsilon-regularized standard deviation stays finite.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=-2, keepdims=True)
    var = np.square(x.data - mu).mean(axis=-2, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd

    def backward(g):
        dx = istd * (
            g
            - g.mean(axis=-2, keepdims=True)
            - xhat * (g * xhat).mean(axis=-2, keepdims=True)
        )
        _accumulate(x, dx)

    return _node(xhat, "instance_norm", (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * np.square(x.data)) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    return _node(out_data, "gelu", (x,), backward)


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.data.shape[axis]

    def backward(g):
        _accumulate(x, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)

    return _node(x.data.mean(axis=axis), "mean", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _node(x.data.sum(), "sum", (x,), backward)


def cross_entropy_with_logits(logits: Tensor, labels, sample_weights=None) -> Tensor:
    """Mean weighted negative log-likelihood, computed with log-sum-exp.

    ``labels`` is an integer vector, ``sample_weights`` an optional
    per-sample weight vector (defaults to all ones).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} vs logits {logits.shape}")
    if sample_weights is None:
        w = np.ones(n, dtype=logits.data.dtype)
    else:
        w = np.asarray(sample_weights, dtype=logits.data.dtype)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    nll = lse - logits.data[np.arange(n), labels]
    out_data = np.asarray((w * nll).sum() / n, dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        dlogits = probs
        dlogits[np.arange(n), labels] -= 1.0
        dlogits *= (w / n)[:, None]
        _accumulate(logits, dlogits * float(g))

    return _node(out_data, "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
