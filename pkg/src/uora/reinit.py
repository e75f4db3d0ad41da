"""Threshold-triggered, interpolated reinitialization of frozen UORA matrices.

After every optimizer step each entry of the scaling vector ``d`` is checked.
Dimension ``i`` fires once ``|d_i| < tau`` has held for ``count_k``
consecutive observations; row ``i`` of ``A`` and column ``i`` of ``B`` (the
pair scaled by ``d_i``) are then blended with fresh random draws:
``new = alpha * old + (1 - alpha) * fresh``.

Draws come from a per-layer stream keyed by cursor, so the event log plus the
initial seed is enough to rebuild the matrices bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BoundsError, ConfigError, ShapeError
from .linalg import STREAM_REINIT, InitKind, SeededRng, as_vector, draw_segment, lerp

CADENCES = ("step", "epoch")


@dataclass(frozen=True)
class ReinitConfig:
    tau: float = 1e-4
    count_k: int = 1
    alpha: float = 0.7
    # None means "same family and gain as the matrices' initializer"
    rand_kind: InitKind | None = None
    cadence: str = "step"
    start_step: int = 0
    reset_moments: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if int(self.count_k) != self.count_k or self.count_k < 0:
            raise ConfigError(f"count_k must be a non-negative integer, got {self.count_k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.cadence not in CADENCES:
            raise ConfigError(f"cadence must be one of {CADENCES}, got {self.cadence!r}")
        if self.start_step < 0:
            raise ConfigError("start_step must be >= 0")

    @property
    def enabled(self):
        return self.count_k > 0

    @classmethod
    def disabled(cls):
        return cls(count_k=0)


@dataclass(frozen=True, order=True)
class ReinitEvent:
    step: int
    dim: int
    matrix: str  # "A" (row dim) or "B" (column dim)
    layer_id: int
    rng_cursor: int


@dataclass
class ReinitMonitor:
    rank: int
    config: ReinitConfig
    layer_id: int = 0
    counters: np.ndarray = None
    event_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.counters is None:
            self.counters = np.zeros(self.rank, dtype=np.int64)

    def observe(self, d_vec, step):
        return observe_step(self, d_vec, step)

    def record(self, events):
        for ev in events:
            if self.event_log and (ev.step, ev.dim, ev.matrix) <= _key(self.event_log[-1]):
                raise ValueError(f"event {ev} out of order after {self.event_log[-1]}")
            self.event_log.append(ev)

    def dims_fired(self):
        return sorted({ev.dim for ev in self.event_log})


def _key(ev):
    return (ev.step, ev.dim, ev.matrix)


def observe_step(monitor, d_vec, step):
    """Update streak counters from ``d_vec``; return the dims that fire at ``step``.

    A dimension's counter grows while ``|d_i| < tau`` and drops to zero when
    the magnitude recovers or right after the dimension fires. With
    ``count_k == 0`` nothing ever fires.
    """
    d_vec = as_vector(d_vec, "d_vec")
    if d_vec.shape[0] != monitor.counters.shape[0]:
        raise ShapeError(f"d_vec has length {d_vec.shape[0]}, monitor tracks {monitor.counters.shape[0]}")
    cfg = monitor.config
    fired = kernels.observe_step(monitor.counters, d_vec, cfg.tau, cfg.count_k)
    return [int(i) for i in fired]


def _rand_kind(s, config):
    if config.rand_kind is not None:
        return config.rand_kind
    if s.origin is not None:
        return s.origin.init
    return InitKind()


def reinit_dimension(s, i, config, rng=None, step=0):
    """Blend row ``i`` of A and column ``i`` of B toward fresh random draws.

    ``d`` and ``b`` are left alone. Each matrix touched consumes one draw from
    ``rng`` (defaults to the state's reinit stream) and yields one
    :class:`ReinitEvent`; the events are returned in (A, B) order.
    """
    if not 0 <= i < s.rank:
        raise BoundsError(f"dimension {i} out of range for rank {s.rank}")
    rng = rng if rng is not None else s.reinit_rng
    if rng is None:
        raise ConfigError("state has no reinit stream; pass rng explicitly")
    kind = _rand_kind(s, config)
    s.privatize()

    cursor_a = rng.cursor
    fresh = draw_segment(kind, s.d_in, s.a.shape, rng.next_generator())
    s.a[i, :] = lerp(s.a[i, :], fresh, config.alpha)

    cursor_b = rng.cursor
    fresh = draw_segment(kind, s.d_out, s.bm.shape, rng.next_generator())
    s.bm[:, i] = lerp(s.bm[:, i], fresh, config.alpha)

    return [ReinitEvent(step, i, "A", s.layer_id, cursor_a),
            ReinitEvent(step, i, "B", s.layer_id, cursor_b)]


def replay_events(a, bm, events, alpha, kind, seed, layer_id):
    """Apply logged events to copies of ``a`` and ``bm``; returns the new pair."""
    a = np.array(a, dtype=np.float64, copy=True)
    bm = np.array(bm, dtype=np.float64, copy=True)
    stream = SeededRng(seed, STREAM_REINIT + layer_id)
    r = a.shape[0]
    for ev in events:
        if not 0 <= ev.dim < r:
            raise BoundsError(f"event {ev} names dimension outside rank {r}")
        gen = stream.generator_at(ev.rng_cursor)
        if ev.matrix == "A":
            fresh = draw_segment(kind, a.shape[1], a.shape, gen)
            a[ev.dim, :] = lerp(a[ev.dim, :], fresh, alpha)
        elif ev.matrix == "B":
            fresh = draw_segment(kind, bm.shape[0], bm.shape, gen)
            bm[:, ev.dim] = lerp(bm[:, ev.dim], fresh, alpha)
        else:
            raise ValueError(f"event {ev} has unknown matrix tag {ev.matrix!r}")
    return a, bm


def reconstruct(state_like, events, config):
    """Rebuild (A, B) for a UORA state from its origin and event log."""
    origin = state_like.origin
    a, bm = origin.draw(state_like.d_out, state_like.d_in, state_like.rank)
    kind = config.rand_kind if config.rand_kind is not None else origin.init
    return replay_events(a, bm, events, config.alpha, kind, origin.seed, state_like.layer_id)
