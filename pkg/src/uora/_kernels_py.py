"""Reference numpy implementation of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature and
semantics. Callers pass C-contiguous float64 arrays; validation happens one
level up, in :mod:`uora.adapters` and friends.

Batch convention: activations are ``(n, features)``; weights are
``(out_features, in_features)``.
"""
import numpy as np

BACKEND = "python"


def matmul(a, b):
    return a @ b


def lerp(old, rand, alpha):
    if alpha == 1.0:
        return old.copy()
    if alpha == 0.0:
        return rand.copy()
    return alpha * old + (1.0 - alpha) * rand


def linear_forward(x, w0, bias):
    return x @ w0.T + bias


def uora_forward(x, w0, bias, a, bm, d, bv):
    u = x @ a.T
    delta = ((u * d) @ bm.T) * bv
    return x @ w0.T + bias + delta


def uora_backward(x, w0, a, bm, d, bv, g):
    u = x @ a.T
    z = (u * d) @ bm.T
    grad_b = (z * g).sum(axis=0)
    t = (g * bv) @ bm
    grad_d = (u * t).sum(axis=0)
    grad_x = g @ w0 + (t * d) @ a
    return grad_d, grad_b, grad_x


def lora_forward(x, w0, bias, a, bm):
    return x @ w0.T + bias + (x @ a.T) @ bm.T


def lora_backward(x, w0, a, bm, g):
    u = x @ a.T
    gb = g @ bm
    grad_a = gb.T @ x
    grad_bm = g.T @ u
    grad_x = g @ w0 + gb @ a
    return grad_a, grad_bm, grad_x


def observe_step(counters, d, tau, count_k):
    if count_k == 0:
        return np.empty(0, dtype=np.int64)
    below = np.abs(d) < tau
    counters[:] = np.where(below, counters + 1, 0)
    fired = np.flatnonzero(counters >= count_k).astype(np.int64)
    counters[fired] = 0
    return fired


def adam_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def sgd_step(p, g, lr, weight_decay):
    p -= lr * (g + weight_decay * p)
