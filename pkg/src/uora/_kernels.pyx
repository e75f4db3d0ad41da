# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``_kernels_py``.

Loop order in the fused kernels is fixed, so results are bitwise reproducible
for a given build and BLAS thread count.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow

cnp.import_array()

BACKEND = "cython"


# Every dense product goes through numpy's BLAS, which no hand loop here can
# beat; compiled code fuses the element-wise scaling and reductions around them.
from ._kernels_py import linear_forward, lora_backward, lora_forward, matmul  # noqa: F401


def lerp(const double[::1] old, const double[::1] rand, double alpha):
    cdef Py_ssize_t i, n = old.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double beta = 1.0 - alpha
    if alpha == 1.0:
        for i in range(n):
            o[i] = old[i]
    elif alpha == 0.0:
        for i in range(n):
            o[i] = rand[i]
    else:
        for i in range(n):
            o[i] = alpha * old[i] + beta * rand[i]
    return out


def uora_forward(const double[:, ::1] x, const double[:, ::1] w0, const double[::1] bias,
                 const double[:, ::1] a, const double[:, ::1] bm,
                 const double[::1] d, const double[::1] bv):
    cdef Py_ssize_t n = x.shape[0], d_out = w0.shape[0], r = a.shape[0]
    cdef Py_ssize_t s, o, q
    xa = np.asarray(x)
    ud_arr = xa @ np.asarray(a).T
    cdef double[:, ::1] ud = ud_arr
    with nogil:
        for s in range(n):
            for q in range(r):
                ud[s, q] = ud[s, q] * d[q]
    out = xa @ np.asarray(w0).T
    z_arr = ud_arr @ np.asarray(bm).T
    cdef double[:, ::1] h = out
    cdef double[:, ::1] z = z_arr
    with nogil:
        for s in range(n):
            for o in range(d_out):
                h[s, o] = h[s, o] + bias[o] + z[s, o] * bv[o]
    return out


def uora_backward(const double[:, ::1] x, const double[:, ::1] w0,
                  const double[:, ::1] a, const double[:, ::1] bm,
                  const double[::1] d, const double[::1] bv, const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], d_out = w0.shape[0], r = a.shape[0]
    cdef Py_ssize_t s, o, q
    cdef double go
    bma = np.asarray(bm)
    u_arr = np.asarray(x) @ np.asarray(a).T
    ud_arr = np.empty_like(u_arr)
    gb_arr = np.empty((n, d_out), dtype=np.float64)
    grad_d_arr = np.zeros(r, dtype=np.float64)
    grad_b_arr = np.zeros(d_out, dtype=np.float64)
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] ud = ud_arr
    cdef double[:, ::1] gb = gb_arr
    cdef double[::1] grad_d = grad_d_arr
    cdef double[::1] grad_b = grad_b_arr
    with nogil:
        for s in range(n):
            for q in range(r):
                ud[s, q] = u[s, q] * d[q]
            for o in range(d_out):
                gb[s, o] = g[s, o] * bv[o]
    z_arr = ud_arr @ bma.T
    t_arr = gb_arr @ bma
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] t = t_arr
    with nogil:
        for s in range(n):
            for o in range(d_out):
                grad_b[o] += z[s, o] * g[s, o]
            for q in range(r):
                grad_d[q] += u[s, q] * t[s, q]
                t[s, q] = t[s, q] * d[q]
    grad_x = np.asarray(g) @ np.asarray(w0) + t_arr @ np.asarray(a)
    return grad_d_arr, grad_b_arr, grad_x


def observe_step(cnp.int64_t[::1] counters, const double[::1] d, double tau, long count_k):
    cdef Py_ssize_t i, n = d.shape[0], nfired = 0
    fired_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] fired = fired_arr
    if count_k == 0:
        return fired_arr[:0]
    for i in range(n):
        if fabs(d[i]) < tau:
            counters[i] += 1
        else:
            counters[i] = 0
        if counters[i] >= count_k:
            counters[i] = 0
            fired[nfired] = i
            nfired += 1
    return fired_arr[:nfired]


def adam_step(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
              double lr, double beta1, double beta2, double eps, double weight_decay, long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - pow(beta1, <double>t)
    cdef double c2 = 1.0 - pow(beta2, <double>t)
    cdef double gi, mhat, vhat
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            mhat = m[i] / c1
            vhat = v[i] / c2
            p[i] -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p[i])


def sgd_step(double[::1] p, const double[::1] g, double lr, double weight_decay):
    cdef Py_ssize_t i, n = p.shape[0]
    with nogil:
        for i in range(n):
            p[i] -= lr * (g[i] + weight_decay * p[i])
