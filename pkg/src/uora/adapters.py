"""LoRA, VeRA and UORA adapters around a frozen linear layer.

Orientation: weights are ``(d_out, d_in)`` and act on column vectors, so a
layer computes ``h = W0 @ x + bias``. Batched inputs are ``(n, d_in)`` rows.

* LoRA:  ``h = W0 x + B A x`` with trainable ``A (r x d_in)``, ``B (d_out x r)``.
* UORA:  ``h = W0 x + diag(b) B diag(d) A x`` with frozen ``A``, ``B`` and
  trainable vectors ``d`` (length r) and ``b`` (length d_out).
* VeRA is the UORA state with reinitialization switched off.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .linalg import (
    STREAM_INIT,
    STREAM_REINIT,
    STREAM_SHARED,
    InitFamily,
    InitKind,
    SeededRng,
    as_matrix,
    as_vector,
    init_matrix,
)

D_INIT = 0.1
B_INIT = 0.0

METHODS = ("lora", "vera", "uora")


@dataclass
class FrozenLinear:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.ascontiguousarray(as_matrix(self.weight, "weight"))
        if self.bias is not None:
            self.bias = as_vector(self.bias, "bias")
            if self.bias.shape[0] != self.weight.shape[0]:
                raise ShapeError("bias length must equal d_out")

    @property
    def d_out(self):
        return self.weight.shape[0]

    @property
    def d_in(self):
        return self.weight.shape[1]

    def bias_or_zero(self):
        return self.bias if self.bias is not None else np.zeros(self.d_out)

    def forward(self, x):
        x2, squeeze = _batch(x, self.d_in)
        h = kernels.linear_forward(x2, self.weight, self.bias_or_zero())
        return h[0] if squeeze else h


@dataclass(frozen=True)
class SharedHandle:
    id: str


@dataclass(frozen=True)
class PrivateCopy:
    pass


@dataclass(frozen=True)
class MatrixOrigin:
    """Where the initial frozen matrices came from, enough to redraw them."""
    seed: int
    stream_a: int
    stream_b: int
    init: InitKind

    def draw(self, d_out, d_in, rank):
        a = init_matrix(self.init, rank, d_in, SeededRng(self.seed, self.stream_a))
        bm = init_matrix(self.init, d_out, rank, SeededRng(self.seed, self.stream_b))
        return a, bm


@dataclass
class LoraState:
    a: np.ndarray
    bm: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        self.a = np.ascontiguousarray(as_matrix(self.a, "A"))
        self.bm = np.ascontiguousarray(as_matrix(self.bm, "B"))
        if self.bm.shape[1] != self.a.shape[0]:
            raise ShapeError(f"rank mismatch: A is {self.a.shape}, B is {self.bm.shape}")
        _check_rank(self.rank, self.d_out, self.d_in)

    method = "lora"

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def d_in(self):
        return self.a.shape[1]

    @property
    def d_out(self):
        return self.bm.shape[0]

    @classmethod
    def create(cls, d_out, d_in, rank, seed, layer_id=0, init=None):
        """A random, B zero, so the adapter starts as an exact no-op."""
        _check_rank(rank, d_out, d_in)
        init = init or InitKind(InitFamily.RANDOM_UNIFORM)
        a = init_matrix(init, rank, d_in, SeededRng(seed, STREAM_INIT + 2 * layer_id))
        return cls(a, np.zeros((d_out, rank)), layer_id)

    def trainable(self):
        return {"A": self.a, "B": self.bm}

    def delta_weight(self):
        return self.bm @ self.a


@dataclass
class UoraState:
    a: np.ndarray
    bm: np.ndarray
    d: np.ndarray
    bv: np.ndarray
    origin: MatrixOrigin | None = None
    provenance: SharedHandle | PrivateCopy = field(default_factory=PrivateCopy)
    layer_id: int = 0
    method: str = "uora"
    reinit_rng: SeededRng | None = None

    def __post_init__(self):
        self.a = np.ascontiguousarray(as_matrix(self.a, "A"))
        self.bm = np.ascontiguousarray(as_matrix(self.bm, "B"))
        self.d = np.ascontiguousarray(as_vector(self.d, "d"))
        self.bv = np.ascontiguousarray(as_vector(self.bv, "b"))
        r = self.a.shape[0]
        if self.bm.shape[1] != r:
            raise ShapeError(f"rank mismatch: A is {self.a.shape}, B is {self.bm.shape}")
        if self.d.shape[0] != r:
            raise ShapeError(f"d has length {self.d.shape[0]}, expected rank {r}")
        if self.bv.shape[0] != self.bm.shape[0]:
            raise ShapeError(f"b has length {self.bv.shape[0]}, expected d_out {self.bm.shape[0]}")
        if self.method not in ("uora", "vera"):
            raise ConfigError(f"UoraState method must be uora or vera, got {self.method!r}")
        _check_rank(r, self.d_out, self.d_in)
        if self.reinit_rng is None and self.origin is not None:
            self.reinit_rng = SeededRng(self.origin.seed, STREAM_REINIT + self.layer_id)

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def d_in(self):
        return self.a.shape[1]

    @property
    def d_out(self):
        return self.bm.shape[0]

    @classmethod
    def create(cls, d_out, d_in, rank, seed, layer_id=0, init=None, method="uora", shared=None):
        """Fresh state with ``d = 0.1`` and ``b = 0``.

        ``shared`` is an optional :class:`SharedMatrices` pool; states drawn
        from the same pool alias one pair of frozen matrices until their
        first reinitialization.
        """
        _check_rank(rank, d_out, d_in)
        init = init or InitKind()
        if shared is not None:
            origin, a, bm, key = shared.get(d_out, d_in, rank, seed, init)
            provenance = SharedHandle(key)
        else:
            origin = MatrixOrigin(seed, STREAM_INIT + 2 * layer_id, STREAM_INIT + 2 * layer_id + 1, init)
            a, bm = origin.draw(d_out, d_in, rank)
            provenance = PrivateCopy()
        return cls(a, bm, np.full(rank, D_INIT), np.full(d_out, B_INIT), origin,
                   provenance, layer_id, method)

    def trainable(self):
        return {"d": self.d, "b": self.bv}

    def delta_weight(self):
        return (self.bv[:, None] * self.bm * self.d[None, :]) @ self.a

    def privatize(self):
        """Copy-on-write: detach from a shared pool before mutating A or B."""
        if isinstance(self.provenance, SharedHandle):
            self.a = self.a.copy()
            self.bm = self.bm.copy()
            self.provenance = PrivateCopy()

    def matrix_digest(self):
        return matrix_digest(self.a, self.bm)


class SharedMatrices:
    """Pool of frozen (A, B) pairs shared across layers of equal shape."""

    def __init__(self):
        self._pool = {}

    def get(self, d_out, d_in, rank, seed, init):
        key = f"{d_out}x{d_in}r{rank}"
        if key not in self._pool:
            slot = len(self._pool)
            origin = MatrixOrigin(seed, STREAM_SHARED + 2 * slot, STREAM_SHARED + 2 * slot + 1, init)
            a, bm = origin.draw(d_out, d_in, rank)
            self._pool[key] = (origin, a, bm)
        origin, a, bm = self._pool[key]
        return origin, a, bm, key


def matrix_digest(*arrays):
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _check_rank(rank, d_out, d_in):
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if rank > min(d_out, d_in):
        raise ConfigError(f"rank {rank} exceeds min(d_out={d_out}, d_in={d_in})")


def _batch(x, d_in):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != d_in:
        raise ShapeError(f"input has shape {x.shape}, expected last dim {d_in}")
    return x2, squeeze


def _check_pair(layer, s):
    if (layer.d_out, layer.d_in) != (s.d_out, s.d_in):
        raise ShapeError(
            f"adapter is {s.d_out}x{s.d_in} but the frozen layer is {layer.d_out}x{layer.d_in}")


def forward_lora(layer, s, x):
    """``W0 x + bias + B (A x)`` for one input vector or a batch of rows."""
    _check_pair(layer, s)
    x2, squeeze = _batch(x, layer.d_in)
    h = kernels.lora_forward(x2, layer.weight, layer.bias_or_zero(), s.a, s.bm)
    return h[0] if squeeze else h


def forward_uora(layer, s, x):
    """``W0 x + bias + b * (B (d * (A x)))`` for one vector or a batch of rows."""
    _check_pair(layer, s)
    x2, squeeze = _batch(x, layer.d_in)
    h = kernels.uora_forward(x2, layer.weight, layer.bias_or_zero(), s.a, s.bm, s.d, s.bv)
    return h[0] if squeeze else h


def _grad_batch(grad_out, d_out, n):
    g = np.asarray(grad_out, dtype=np.float64)
    g2 = g[None, :] if g.ndim == 1 else g
    if g2.shape != (n, d_out):
        raise ShapeError(f"grad_out has shape {g.shape}, expected ({n}, {d_out})")
    return g2


def backward_uora(layer, s, x, grad_out):
    """Return ``(grad_d, grad_b, grad_x)``; d and b gradients are summed over the batch."""
    _check_pair(layer, s)
    x2, squeeze = _batch(x, layer.d_in)
    g2 = _grad_batch(grad_out, layer.d_out, x2.shape[0])
    grad_d, grad_b, grad_x = kernels.uora_backward(x2, layer.weight, s.a, s.bm, s.d, s.bv, g2)
    return grad_d, grad_b, (grad_x[0] if squeeze else grad_x)


def backward_lora(layer, s, x, grad_out):
    """Return ``(grad_A, grad_B, grad_x)``."""
    _check_pair(layer, s)
    x2, squeeze = _batch(x, layer.d_in)
    g2 = _grad_batch(grad_out, layer.d_out, x2.shape[0])
    grad_a, grad_bm, grad_x = kernels.lora_backward(x2, layer.weight, s.a, s.bm, g2)
    return grad_a, grad_bm, (grad_x[0] if squeeze else grad_x)


def merge(layer, s):
    """Fold the adapter into the base weight; returns a new plain layer."""
    _check_pair(layer, s)
    bias = None if layer.bias is None else layer.bias.copy()
    return FrozenLinear(layer.weight + s.delta_weight(), bias)


@dataclass(frozen=True)
class ParamCountReport:
    method: str
    L_tuned: int
    d_model: int
    r: int
    trainable_count: int

    def human(self):
        return human_count(self.trainable_count)


def human_count(n):
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def count_params(method, L_tuned, d_model, r):
    """Trainable adapter parameters for ``L_tuned`` adapted projections.

    UORA and VeRA train ``d_model + r`` values per projection; LoRA trains
    ``2 * d_model * r``.
    """
    method = str(method).lower()
    for name, value in (("L_tuned", L_tuned), ("d_model", d_model), ("r", r)):
        if int(value) != value or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value}")
    L_tuned, d_model, r = int(L_tuned), int(d_model), int(r)
    if method in ("uora", "vera"):
        count = L_tuned * (d_model + r)
    elif method == "lora":
        count = 2 * L_tuned * d_model * r
    else:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    return ParamCountReport(method, L_tuned, d_model, r, count)


class AdaptedLinear:
    """A frozen linear layer with an optional adapter attached.

    This is the unit the toy models are built from: ``forward`` caches its
    input, ``backward`` returns ``(param_grads, grad_x)`` where
    ``param_grads`` maps the adapter's trainable names to gradients.
    """

    def __init__(self, name, base, adapter=None):
        self.name = name
        self.base = base
        self.adapter = adapter
        if adapter is not None:
            _check_pair(base, adapter)

    @property
    def method(self):
        return "none" if self.adapter is None else self.adapter.method

    def forward(self, x):
        if self.adapter is None:
            return self.base.forward(x)
        if isinstance(self.adapter, LoraState):
            return forward_lora(self.base, self.adapter, x)
        return forward_uora(self.base, self.adapter, x)

    def backward(self, x, grad_out):
        if self.adapter is None:
            return {}, np.asarray(grad_out) @ self.base.weight
        if isinstance(self.adapter, LoraState):
            ga, gb, gx = backward_lora(self.base, self.adapter, x, grad_out)
            return {"A": ga, "B": gb}, gx
        gd, gb, gx = backward_uora(self.base, self.adapter, x, grad_out)
        return {"d": gd, "b": gb}, gx

    def merged(self):
        if self.adapter is None:
            return FrozenLinear(self.base.weight.copy(), None if self.base.bias is None else self.base.bias.copy())
        return merge(self.base, self.adapter)
