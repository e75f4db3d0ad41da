"""Backend selection for the hot kernels.

The compiled extension (``uora._kernels``) is used when it imports; otherwise
the numpy module ``uora._kernels_py`` takes over. Set ``UORA_KERNELS=python``
to force the fallback, or ``UORA_KERNELS=cython`` to fail loudly when the
extension is missing.
"""
import importlib
import logging
import os

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

_NAMES = ("matmul", "lerp", "linear_forward", "uora_forward", "uora_backward",
          "lora_forward", "lora_backward", "observe_step", "adam_step", "sgd_step")


def load_backend(name="auto"):
    """Return the kernel module for ``name`` (``auto``, ``cython`` or ``python``)."""
    if name == "python":
        return _kernels_py
    try:
        return importlib.import_module("uora._kernels")
    except ImportError:
        if name == "cython":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")
        return _kernels_py


def available_backends():
    names = ["python"]
    try:
        importlib.import_module("uora._kernels")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


_backend = load_backend(os.environ.get("UORA_KERNELS", "auto"))


def backend():
    return _backend


def backend_name():
    return _backend.BACKEND


def set_backend(name):
    """Switch the process-wide backend; returns the previous backend name."""
    global _backend
    previous = _backend.BACKEND
    _backend = load_backend(name)
    return previous


def c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b):
    return _backend.matmul(c64(a), c64(b))


def lerp(old, rand, alpha):
    return _backend.lerp(c64(old), c64(rand), float(alpha))


def linear_forward(x, w0, bias):
    return _backend.linear_forward(c64(x), c64(w0), c64(bias))


def uora_forward(x, w0, bias, a, bm, d, bv):
    return _backend.uora_forward(c64(x), c64(w0), c64(bias), c64(a), c64(bm), c64(d), c64(bv))


def uora_backward(x, w0, a, bm, d, bv, g):
    return _backend.uora_backward(c64(x), c64(w0), c64(a), c64(bm), c64(d), c64(bv), c64(g))


def lora_forward(x, w0, bias, a, bm):
    return _backend.lora_forward(c64(x), c64(w0), c64(bias), c64(a), c64(bm))


def lora_backward(x, w0, a, bm, g):
    return _backend.lora_backward(c64(x), c64(w0), c64(a), c64(bm), c64(g))


def observe_step(counters, d, tau, count_k):
    return _backend.observe_step(counters, c64(d), float(tau), int(count_k))


def adam_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    # p, m, v are updated in place and must already be contiguous float64
    _backend.adam_step(p.reshape(-1), c64(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                       float(lr), float(beta1), float(beta2), float(eps),
                       float(weight_decay), int(t))


def sgd_step(p, g, lr, weight_decay):
    _backend.sgd_step(p.reshape(-1), c64(g).reshape(-1), float(lr), float(weight_decay))
