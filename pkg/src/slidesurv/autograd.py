"""Small define-by-run reverse-mode autodiff over dense numpy arrays.

Only the operators the survival pipeline needs are provided. Every op
records its parents and a closure mapping the output gradient to parent
gradients; :func:`backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

LOG_2PI = math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Raise on NaN/Inf produced by any op. Cheap at pipeline sizes.
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        data = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.isfinite(data).all():
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, True, parents, backward_fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topo_order(root):
    order, done, active = [], set(), set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            active.discard(key)
            done.add(key)
            order.append(node)
            continue
        if key in done:
            continue
        if key in active:
            raise RuntimeError("cycle in computation graph")
        active.add(key)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in done:
                if id(p) in active:
                    raise RuntimeError("cycle in computation graph")
                stack.append((p, False))
    return order


def grad(loss, params):
    """Return ``[d loss / d p for p in params]``; untouched params get zeros."""
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b):
    """Matrix product for operands of rank 2 or matching batched rank 3."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- elementwise

def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def normal_cdf(a):
    """Differentiable standard normal CDF."""
    a = as_tensor(a)
    return _make(ndtr(a.data), (a,),
                 lambda g: (g * INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),))


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x)
    return _make(x * cdf, (a,),
                 lambda g: (g * (cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


def clamp_min(a, floor):
    """max(a, floor); gradient is zero where the floor is active."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def dropout(a, p, rng, training):
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def logsumexp(a, axis=None):
    """Stable log-sum-exp, reduced over ``axis`` (all axes if None)."""
    if a.data.size == 0:
        raise ValueError("logsumexp of an empty tensor")
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = m + np.log(tot)
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def bw(g):
        gk = np.asarray(g).reshape(out_k.shape)
        return (gk * s / tot,)

    return _make(out, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gamma.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take_rows(a, idx):
    """Rows ``a[idx]`` for an integer index array along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------- scalar special functions

def normal_cdf_value(x):
    """Standard normal CDF on plain floats or arrays."""
    return ndtr(x)


def stable_inverse_softplus(t):
    """y with log(1 + exp(y)) == t, for t > 0.

    Written as t + log(-expm1(-t)), which equals log(expm1(t)) without the
    overflow of expm1 at large t.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("inverse softplus is only defined for t > 0")
    out = t + np.log(-np.expm1(-t))
    return float(out) if out.ndim == 0 else out


def softplus_value(y):
    return np.logaddexp(0.0, y)


def log_sum_exp(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))
