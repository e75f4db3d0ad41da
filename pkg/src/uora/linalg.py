"""Dense float64 arithmetic, seeded random streams and matrix initializers.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64
(2-D and 1-D respectively). The helpers here validate shapes and finiteness
at module boundaries and route the arithmetic to :mod:`uora.kernels`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

# stream ids; per-layer streams are offset by the layer index
STREAM_INIT = 1 << 32
STREAM_REINIT = 2 << 32
STREAM_DATA = 3 << 32
STREAM_MODEL = 4 << 32
STREAM_SHARED = 5 << 32


def as_matrix(a, name="matrix"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matmul(a, b):
    """Dense product ``a @ b`` with shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


def lerp(v_old, v_rand, alpha):
    """Return ``alpha * v_old + (1 - alpha) * v_rand``.

    The endpoints are exact: ``alpha == 1`` returns a copy of ``v_old`` and
    ``alpha == 0`` a copy of ``v_rand``, bit for bit.
    """
    v_old = as_vector(v_old, "v_old")
    v_rand = as_vector(v_rand, "v_rand")
    if v_old.shape != v_rand.shape:
        raise ShapeError(f"lerp length mismatch: {v_old.shape[0]} vs {v_rand.shape[0]}")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return kernels.lerp(v_old, v_rand, alpha)


class SeededRng:
    """Splittable random stream keyed by ``(seed, stream_id, cursor)``.

    Each draw builds a Philox generator from the three integers and then
    advances the cursor by one, so any past draw can be replayed from its
    cursor alone and distinct streams never interfere.
    """

    def __init__(self, seed, stream_id=0, cursor=0):
        if seed < 0 or stream_id < 0:
            raise ConfigError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.cursor = int(cursor)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id}, cursor={self.cursor})"

    def generator_at(self, cursor):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, int(cursor)))
        return np.random.Generator(np.random.Philox(ss))

    def next_generator(self):
        gen = self.generator_at(self.cursor)
        self.cursor += 1
        return gen

    def normal(self, size):
        return self.next_generator().standard_normal(size)

    def uniform(self, low, high, size):
        return self.next_generator().uniform(low, high, size)

    def integers(self, low, high, size):
        return self.next_generator().integers(low, high, size)

    def permutation(self, n):
        return self.next_generator().permutation(n)

    def substream(self, offset):
        """A fresh stream with the same seed and ``stream_id + offset``."""
        return SeededRng(self.seed, self.stream_id + int(offset))


class InitFamily(str, enum.Enum):
    ORTHOGONAL_UNIFORM = "orthogonal"
    KAIMING_UNIFORM = "kaiming"
    XAVIER_UNIFORM = "xavier"
    RANDOM_UNIFORM = "random"


@dataclass(frozen=True)
class InitKind:
    family: InitFamily = InitFamily.ORTHOGONAL_UNIFORM
    gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", parse_family(self.family))
        if not self.gain > 0:
            raise ConfigError(f"init gain must be positive, got {self.gain}")


def parse_family(name):
    if isinstance(name, InitFamily):
        return name
    aliases = {
        "orthogonal": InitFamily.ORTHOGONAL_UNIFORM,
        "orthogonal_uniform": InitFamily.ORTHOGONAL_UNIFORM,
        "kaiming": InitFamily.KAIMING_UNIFORM,
        "kaiming_uniform": InitFamily.KAIMING_UNIFORM,
        "xavier": InitFamily.XAVIER_UNIFORM,
        "xavier_uniform": InitFamily.XAVIER_UNIFORM,
        "random": InitFamily.RANDOM_UNIFORM,
        "random_uniform": InitFamily.RANDOM_UNIFORM,
    }
    try:
        return aliases[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown init family {name!r}; expected one of {sorted(aliases)}") from None


def uniform_bound(kind, fan_in, fan_out):
    """Half-width of the uniform distribution used by the non-orthogonal families."""
    if kind.family is InitFamily.KAIMING_UNIFORM:
        return kind.gain * math.sqrt(6.0 / fan_in)
    if kind.family is InitFamily.XAVIER_UNIFORM:
        return kind.gain * math.sqrt(6.0 / (fan_in + fan_out))
    if kind.family is InitFamily.RANDOM_UNIFORM:
        return kind.gain / math.sqrt(fan_in)
    raise ConfigError(f"{kind.family.value} has no uniform bound")


def _semi_orthogonal(gen, rows, cols):
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(gen.standard_normal((big, small)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return q if rows >= cols else q.T


def init_matrix(kind, rows, cols, rng):
    """Draw a ``rows x cols`` matrix; consumes one draw from ``rng``.

    The weight is read as mapping ``cols`` inputs to ``rows`` outputs, so
    ``fan_in = cols`` and ``fan_out = rows``. The orthogonal family returns
    orthonormal rows (``rows <= cols``) or columns (``rows > cols``) scaled by
    the gain.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dims must be positive, got {rows}x{cols}")
    gen = rng.next_generator()
    if kind.family is InitFamily.ORTHOGONAL_UNIFORM:
        out = kind.gain * _semi_orthogonal(gen, rows, cols)
    else:
        bound = uniform_bound(kind, cols, rows)
        out = gen.uniform(-bound, bound, (rows, cols))
    return np.ascontiguousarray(out)


def draw_segment(kind, length, parent_shape, gen):
    """Fresh row/column replacement for a matrix of ``parent_shape``.

    Uniform families reuse the parent's fan-based bound; the orthogonal family
    draws a unit direction scaled by the gain, matching the norm of a row or
    column of the original semi-orthogonal matrix.
    """
    rows, cols = parent_shape
    if kind.family is InitFamily.ORTHOGONAL_UNIFORM:
        v = gen.standard_normal(length)
        return kind.gain * v / np.linalg.norm(v)
    bound = uniform_bound(kind, cols, rows)
    return gen.uniform(-bound, bound, length)
