"""A small tape-based reverse-mode autodiff over numpy arrays.

Only what the toy models need: broadcasting add/mul, batched matmul,
reshape/transpose, relu, softmax, layer norm, mean, two losses, and the
adapted-linear node that defers to the analytic adapter gradients.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def backward(self, grad=None):
        """Accumulate gradients into every reachable tensor that requires them."""
        order, seen = [], set()
        stack = [(self, False)]
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
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else grad
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def param(array, name=None):
    """Leaf that shares memory with ``array`` and collects a gradient."""
    return Tensor(array, requires_grad=True, name=name)


def const(array):
    return Tensor(np.asarray(array, dtype=np.float64))


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return Tensor(a.data + b.data, (a, b), bw)


def mul(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return Tensor(a.data * b.data, (a, b), bw)


def scale(a, c):
    return Tensor(a.data * c, (a,), lambda g: _accum(a, g * c))


def matmul(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return Tensor(a.data @ b.data, (a, b), bw)


def reshape(a, shape):
    return Tensor(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes):
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def relu(a):
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))
    return Tensor(s, (a,), bw)


def layer_norm(a, eps=1e-5):
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))
    return Tensor(y, (a,), bw)


def mean(a, axis):
    n = a.shape[axis]

    def bw(g):
        _accum(a, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)
    return Tensor(a.data.mean(axis=axis), (a,), bw)


def dense(x, w, b=None):
    """``x @ w.T + b`` for a trainable head."""
    out = matmul(x, transpose(w, (1, 0)))
    return add(out, b) if b is not None else out


def adapted(layer, x, params):
    """Apply an :class:`~uora.adapters.AdaptedLinear` to the last axis of ``x``.

    ``params`` maps the adapter's trainable names to the leaf tensors wrapping
    them; their gradients come from the analytic adapter backward.
    """
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    h = layer.forward(x2)
    out_shape = lead + (h.shape[-1],)

    def bw(g):
        grads, gx = layer.backward(x2, g.reshape(-1, out_shape[-1]))
        for key, gv in grads.items():
            _accum(params[key], gv)
        _accum(x, gx.reshape(x.shape))
    parents = (x,) + tuple(params[k] for k in sorted(params))
    return Tensor(h.reshape(out_shape), parents, bw)


def mse(pred, target):
    diff = pred.data - target
    n = diff.size
    return Tensor(np.array((diff * diff).sum() / n), (pred,), lambda g: _accum(pred, g * 2.0 * diff / n))


def cross_entropy(logits, labels):
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, g * p / n)
    return Tensor(np.array(loss), (logits,), bw)
