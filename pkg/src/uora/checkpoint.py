"""Adapter-only checkpoints (byte layout in ``docs/checkpoint_format.md``).

FULL mode stores the frozen matrices; COMPACT mode stores only the init seed
and the reinit event log and rebuilds ``A`` and ``B`` by replay. Both modes
carry SHA-256 digests of the matrices plus short per-dimension digests, so a
replay that drifts is caught and localized.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .adapters import LoraState, MatrixOrigin, PrivateCopy, SharedHandle, UoraState, matrix_digest
from .errors import ChecksumError, ConfigError, DecodeError, VersionError
from .linalg import InitKind
from .reinit import ReinitConfig, ReinitEvent, ReinitMonitor, reconstruct

MAGIC = b"UORACKPT"
VERSION = 1
FULL, COMPACT = "full", "compact"
_MODES = {FULL: 0, COMPACT: 1}
_PREAMBLE = struct.Struct("<8sHBBI")      # magic, version, mode, reserved, n_sections
_SECTION = struct.Struct("<4sIQ")         # tag, layer index, payload length
_CRC = struct.Struct("<I")
_EVENT = struct.Struct("<qqBq")           # step, dim, matrix (0=A, 1=B), rng cursor
GLOBAL = 0xFFFFFFFF


def _f8(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dim_digests(a, bm):
    """8-byte digest of every row of A followed by every column of B."""
    out = []
    for i in range(a.shape[0]):
        out.append(hashlib.sha256(_f8(a[i, :])).digest()[:8])
    for i in range(bm.shape[1]):
        out.append(hashlib.sha256(_f8(bm[:, i])).digest()[:8])
    return b"".join(out)


def _reinit_to_json(cfg):
    kind = cfg.rand_kind
    return {"tau": cfg.tau, "count_k": cfg.count_k, "alpha": cfg.alpha,
            "rand_kind": None if kind is None else {"family": kind.family.value, "gain": kind.gain},
            "cadence": cfg.cadence, "start_step": cfg.start_step, "reset_moments": cfg.reset_moments}


def _reinit_from_json(d):
    d = dict(d)
    rk = d.pop("rand_kind")
    return ReinitConfig(rand_kind=None if rk is None else InitKind(rk["family"], rk["gain"]), **d)


def _layer_header(state, monitor):
    h = {"layer_id": state.layer_id, "method": state.method, "d_out": state.d_out,
         "d_in": state.d_in, "rank": state.rank}
    if isinstance(state, UoraState):
        o = state.origin
        h["origin"] = None if o is None else {
            "seed": o.seed, "stream_a": o.stream_a, "stream_b": o.stream_b,
            "init": {"family": o.init.family.value, "gain": o.init.gain}}
        h["provenance"] = state.provenance.id if isinstance(state.provenance, SharedHandle) else None
        h["reinit_cursor"] = None if state.reinit_rng is None else state.reinit_rng.cursor
        h["monitor"] = None if monitor is None else _reinit_to_json(monitor.config)
        h["n_events"] = 0 if monitor is None else len(monitor.event_log)
    return h


def save_checkpoint(states, monitors, path, mode=FULL):
    """Write adapter states (and their reinit monitors) to ``path``.

    ``monitors`` is a list aligned with ``states``; use ``None`` for layers
    without one. COMPACT mode needs every UORA state to carry its
    :class:`~uora.adapters.MatrixOrigin`.
    """
    if mode not in _MODES:
        raise ConfigError(f"mode must be {FULL!r} or {COMPACT!r}")
    monitors = list(monitors) if monitors is not None else [None] * len(states)
    if len(monitors) != len(states):
        raise ConfigError("monitors must align with states")
    header = {"format_version": VERSION, "mode": mode, "layers": []}
    sections = []
    for idx, (s, mon) in enumerate(zip(states, monitors)):
        header["layers"].append(_layer_header(s, mon))
        if isinstance(s, LoraState):
            sections.append((b"MATS", idx, _f8(s.a) + _f8(s.bm)))
            sections.append((b"DIGS", idx, bytes.fromhex(matrix_digest(s.a, s.bm)) + dim_digests(s.a, s.bm)))
            continue
        sections.append((b"VECS", idx, _f8(s.d) + _f8(s.bv)))
        if mode == FULL:
            sections.append((b"MATS", idx, _f8(s.a) + _f8(s.bm)))
        else:
            if s.origin is None:
                raise ConfigError(f"layer {s.layer_id} has no origin; COMPACT mode cannot rebuild it")
        if mon is not None:
            ev = b"".join(_EVENT.pack(e.step, e.dim, 0 if e.matrix == "A" else 1, e.rng_cursor)
                          for e in mon.event_log)
            if mode == COMPACT or mon.event_log:
                sections.append((b"EVNT", idx, ev))
            sections.append((b"CNTR", idx, np.ascontiguousarray(mon.counters, dtype="<i8").tobytes()))
        sections.append((b"DIGS", idx, bytes.fromhex(s.matrix_digest()) + dim_digests(s.a, s.bm)))

    head = json.dumps(header, sort_keys=True).encode()
    sections.insert(0, (b"HEAD", GLOBAL, head))
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, _MODES[mode], 0, len(sections)))
        for tag, idx, payload in sections:
            fh.write(_SECTION.pack(tag, idx, len(payload)))
            fh.write(payload)
            fh.write(_CRC.pack(zlib.crc32(payload)))


def _section_name(tag, idx):
    t = tag.decode("ascii", "replace")
    return t if idx == GLOBAL else f"layer {idx} {t}"


def read_sections(path):
    """Parse the container; returns ``(mode, header, {(tag, idx): payload})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREAMBLE.size:
        raise DecodeError("preamble", "file shorter than the fixed preamble")
    magic, version, mode_code, _, n = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DecodeError("preamble", f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    modes = {v: k for k, v in _MODES.items()}
    if mode_code not in modes:
        raise DecodeError("preamble", f"unknown mode code {mode_code}")
    pos = _PREAMBLE.size
    out = {}
    for k in range(n):
        if pos + _SECTION.size > len(blob):
            raise DecodeError(f"section #{k}", "truncated section header")
        tag, idx, length = _SECTION.unpack_from(blob, pos)
        name = _section_name(tag, idx)
        pos += _SECTION.size
        end = pos + length
        if end + _CRC.size > len(blob):
            raise DecodeError(name, "truncated payload")
        payload = blob[pos:end]
        (crc,) = _CRC.unpack_from(blob, end)
        if crc != zlib.crc32(payload):
            raise DecodeError(name, "CRC mismatch")
        out[(tag, idx)] = payload
        pos = end + _CRC.size
    if pos != len(blob):
        raise DecodeError("trailer", f"{len(blob) - pos} unexpected trailing bytes")
    if (b"HEAD", GLOBAL) not in out:
        raise DecodeError("HEAD", "missing header section")
    try:
        header = json.loads(out[(b"HEAD", GLOBAL)].decode())
    except ValueError as exc:
        raise DecodeError("HEAD", f"invalid JSON: {exc}") from None
    if header.get("format_version") != VERSION:
        raise VersionError(f"header declares version {header.get('format_version')}")
    return modes[mode_code], header, out


def _take(sections, tag, idx, nbytes=None):
    key = (tag, idx)
    if key not in sections:
        raise DecodeError(_section_name(tag, idx), "section missing")
    payload = sections[key]
    if nbytes is not None and len(payload) != nbytes:
        raise DecodeError(_section_name(tag, idx), f"expected {nbytes} bytes, found {len(payload)}")
    return payload


def _arr(payload, offset, shape):
    n = int(np.prod(shape))
    return np.frombuffer(payload, dtype="<f8", count=n, offset=offset * 8).astype(np.float64).reshape(shape)


def _events(payload, idx, layer_id):
    if len(payload) % _EVENT.size:
        raise DecodeError(_section_name(b"EVNT", idx), "length is not a whole number of events")
    evs = []
    for step, dim, m, cur in _EVENT.iter_unpack(payload):
        if m not in (0, 1):
            raise DecodeError(_section_name(b"EVNT", idx), f"bad matrix tag {m}")
        evs.append(ReinitEvent(step, dim, "A" if m == 0 else "B", layer_id, cur))
    return evs


@dataclass
class LayerCheck:
    index: int
    layer_id: int
    replayed: bool
    ok: bool
    divergent_dims: list
    suspect_events: list

    def describe(self):
        if self.ok:
            how = "replayed" if self.replayed else "checksum only"
            return f"layer {self.layer_id}: PASS ({how})"
        dims = ", ".join(str(d) for d in self.divergent_dims) or "?"
        msg = f"layer {self.layer_id}: FAIL (first divergent dimension {self.divergent_dims[0] if self.divergent_dims else '?'}; divergent dims {dims})"
        if self.suspect_events:
            evs = "; ".join(f"step={e.step} dim={e.dim} matrix={e.matrix} cursor={e.rng_cursor}"
                            for e in self.suspect_events)
            msg += f" suspect events: {evs}"
        return msg


def _decode_layer(mode, lh, sections, idx):
    d_out, d_in, r = lh["d_out"], lh["d_in"], lh["rank"]
    if lh["method"] == "lora":
        mats = _take(sections, b"MATS", idx, 8 * (r * d_in + d_out * r))
        s = LoraState(_arr(mats, 0, (r, d_in)), _arr(mats, r * d_in, (d_out, r)), lh["layer_id"])
        return s, None, False
    vecs = _take(sections, b"VECS", idx, 8 * (r + d_out))
    d, bv = _arr(vecs, 0, (r,)), _arr(vecs, r, (d_out,))
    o = lh.get("origin")
    origin = None if o is None else MatrixOrigin(o["seed"], o["stream_a"], o["stream_b"],
                                                 InitKind(o["init"]["family"], o["init"]["gain"]))
    monitor = None
    if lh.get("monitor") is not None:
        cfg = _reinit_from_json(lh["monitor"])
        counters = np.frombuffer(_take(sections, b"CNTR", idx, 8 * r), dtype="<i8").astype(np.int64)
        evs = _events(sections.get((b"EVNT", idx), b""), idx, lh["layer_id"])
        if len(evs) != lh["n_events"]:
            raise DecodeError(_section_name(b"EVNT", idx), f"expected {lh['n_events']} events, found {len(evs)}")
        monitor = ReinitMonitor(r, cfg, lh["layer_id"], counters.copy(), evs)
    replayed = mode == COMPACT
    if replayed:
        if origin is None:
            raise DecodeError(_section_name(b"HEAD", GLOBAL), f"layer {idx} has no origin for replay")
        proto = UoraState(np.zeros((r, d_in)), np.zeros((d_out, r)), d, bv, origin, layer_id=lh["layer_id"])
        events = monitor.event_log if monitor is not None else []
        cfg = monitor.config if monitor is not None else ReinitConfig.disabled()
        a, bm = reconstruct(proto, events, cfg)
    else:
        mats = _take(sections, b"MATS", idx, 8 * (r * d_in + d_out * r))
        a, bm = _arr(mats, 0, (r, d_in)), _arr(mats, r * d_in, (d_out, r))
    prov = SharedHandle(lh["provenance"]) if lh.get("provenance") else PrivateCopy()
    s = UoraState(a, bm, d, bv, origin, prov, lh["layer_id"], lh["method"])
    if s.reinit_rng is not None and lh.get("reinit_cursor") is not None:
        s.reinit_rng.cursor = lh["reinit_cursor"]
    return s, monitor, replayed


def _check_layer(idx, state, monitor, replayed, sections):
    digs = _take(sections, b"DIGS", idx, 32 + 16 * state.rank)
    want_full, want_dims = digs[:32], digs[32:]
    ok = bytes.fromhex(matrix_digest(state.a, state.bm)) == want_full
    bad = []
    if not ok:
        have = dim_digests(state.a, state.bm)
        r = state.rank
        for j in range(2 * r):
            if have[8 * j:8 * j + 8] != want_dims[8 * j:8 * j + 8]:
                dim = j if j < r else j - r
                if dim not in bad:
                    bad.append(dim)
    suspects = []
    if bad and monitor is not None:
        suspects = [e for e in monitor.event_log if e.dim in bad]
    return LayerCheck(idx, state.layer_id, replayed, ok, bad, suspects)


def verify_checkpoint(path):
    """Decode, rebuild (COMPACT) and checksum every layer; returns ``LayerCheck`` list."""
    mode, header, sections = read_sections(path)
    out = []
    for idx, lh in enumerate(header["layers"]):
        state, monitor, replayed = _decode_layer(mode, lh, sections, idx)
        out.append(_check_layer(idx, state, monitor, replayed, sections))
    return out


def load_checkpoint(path, verify=True):
    """Inverse of :func:`save_checkpoint`; returns ``(states, monitors)``.

    With ``verify`` (the default) a layer whose matrices do not match the
    stored digests raises :class:`ChecksumError`.
    """
    mode, header, sections = read_sections(path)
    states, monitors = [], []
    for idx, lh in enumerate(header["layers"]):
        state, monitor, replayed = _decode_layer(mode, lh, sections, idx)
        if verify:
            chk = _check_layer(idx, state, monitor, replayed, sections)
            if not chk.ok:
                raise ChecksumError(state.layer_id, chk.divergent_dims, chk.describe())
        states.append(state)
        monitors.append(monitor)
    return states, monitors


def checkpoint_model(model, path, mode=FULL):
    """Save every adapted layer of ``model`` in layer order."""
    layers = model.adapted_layers()
    mons = getattr(model, "monitors", {})
    save_checkpoint([l.adapter for l in layers], [mons.get(l.name) for l in layers], path, mode)
