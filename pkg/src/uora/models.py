"""Desk-scale host models: an MLP and a pre-norm mini transformer encoder.

All base weights are frozen numpy arrays drawn once at build time. Trainable
state is the adapters' parameters plus an optional classification head, and
every trainable array is listed in ``Model.params`` (the registry the
optimizer walks).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .adapters import AdaptedLinear, FrozenLinear, LoraState, SharedMatrices, UoraState
from .errors import ConfigError, ShapeError
from .linalg import STREAM_MODEL, InitKind, SeededRng, parse_family

PROJECTIONS = ("query", "key", "value", "output", "mlp_in", "mlp_out")
ADAPTER_METHODS = ("none", "lora", "vera", "uora")


@dataclass
class ModelSpec:
    architecture: str = "mlp"  # "mlp" | "transformer"
    widths: list = field(default_factory=lambda: [32, 32])
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 1
    ff_mult: int = 4
    seq_len: int = 8
    vocab: int = 16
    adapted: list = field(default_factory=lambda: ["mlp_in"])
    method: str = "uora"
    rank: int = 4
    init: str = "orthogonal"
    init_gain: float = 1.0
    share_matrices: bool | None = None  # None: shared for vera, private for uora

    def __post_init__(self):
        if self.architecture not in ("mlp", "transformer"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.method not in ADAPTER_METHODS:
            raise ConfigError(f"unknown adapter method {self.method!r}; expected one of {ADAPTER_METHODS}")
        for name in self.adapted:
            if name not in PROJECTIONS:
                raise ConfigError(f"invalid projection name {name!r}; expected one of {PROJECTIONS}")
        if self.architecture == "mlp":
            bad = [p for p in self.adapted if p not in ("mlp_in", "mlp_out")]
            if bad:
                raise ConfigError(f"projections {bad} do not exist in an MLP")
            if len(self.widths) < 2:
                raise ConfigError("MLP needs at least two widths")
        elif self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.method != "none" and self.rank < 1:
            raise ConfigError("rank must be >= 1")
        parse_family(self.init)

    @property
    def init_kind(self):
        return InitKind(parse_family(self.init), self.init_gain)

    @property
    def shared(self):
        if self.share_matrices is None:
            return self.method == "vera"
        return self.share_matrices


class Model:
    """Container for frozen layers, adapters and the trainable registry.

    ``params`` maps ``"<layer>.<name>"`` to the live numpy array, and
    ``param_groups`` tags each entry as ``"adapter"`` or ``"head"``.
    """

    def __init__(self, spec, layers, head=None, embeddings=None, task_kind="regression"):
        self.spec = spec
        self.layers = layers
        self.head = head  # dict with "weight" and "bias" arrays, or None
        self.embeddings = embeddings
        self.task_kind = task_kind
        self.params = {}
        self.param_groups = {}
        for layer in layers.values():
            if layer.adapter is not None:
                for pname, arr in layer.adapter.trainable().items():
                    self._register(f"{layer.name}.{pname}", arr, "adapter")
        if head is not None:
            self._register("head.weight", head["weight"], "head")
            self._register("head.bias", head["bias"], "head")
        self.nonfinite_layer = None

    def _register(self, key, arr, group):
        self.params[key] = arr
        self.param_groups[key] = group

    def adapted_layers(self):
        return [l for l in self.layers.values() if l.adapter is not None]

    def uora_layers(self):
        return [l for l in self.adapted_layers() if isinstance(l.adapter, UoraState)]

    def adapter_param_count(self):
        return sum(arr.size for k, arr in self.params.items() if self.param_groups[k] == "adapter")

    def frozen_arrays(self):
        """Every array no optimizer step may touch (adapter A/B of UORA included)."""
        out = {}
        for layer in self.layers.values():
            out[f"{layer.name}.W0"] = layer.base.weight
            if layer.base.bias is not None:
                out[f"{layer.name}.bias"] = layer.base.bias
            if isinstance(layer.adapter, UoraState):
                out[f"{layer.name}.A"] = layer.adapter.a
                out[f"{layer.name}.B"] = layer.adapter.bm
        if self.embeddings is not None:
            for k, v in self.embeddings.items():
                out[f"embed.{k}"] = v
        return out

    # -- forward ---------------------------------------------------------
    def _leaves(self):
        return {k: ag.param(arr, k) for k, arr in self.params.items()}

    def _apply(self, name, x, leaves):
        layer = self.layers[name]
        if layer.adapter is None:
            params = {}
        else:
            params = {p: leaves[f"{name}.{p}"] for p in layer.adapter.trainable()}
        out = ag.adapted(layer, x, params)
        if self.nonfinite_layer is None and not np.all(np.isfinite(out.data)):
            self.nonfinite_layer = name
        return out

    def forward(self, inputs, leaves=None):
        leaves = self._leaves() if leaves is None else leaves
        if self.spec.architecture == "mlp":
            out = self._forward_mlp(inputs, leaves)
        else:
            out = self._forward_transformer(inputs, leaves)
        if self.head is not None:
            out = ag.dense(out, leaves["head.weight"], leaves["head.bias"])
        return out, leaves

    def _forward_mlp(self, x, leaves):
        h = ag.const(x)
        names = list(self.layers)
        for j, name in enumerate(names):
            h = self._apply(name, h, leaves)
            if j < len(names) - 1 or self.head is not None:
                h = ag.relu(h)
        return h

    def _forward_transformer(self, tokens, leaves):
        spec = self.spec
        tokens = np.asarray(tokens)
        n, t = tokens.shape
        if t > spec.seq_len:
            raise ShapeError(f"sequence length {t} exceeds model seq_len {spec.seq_len}")
        emb = self.embeddings["token"][tokens] + self.embeddings["position"][None, :t]
        x = ag.const(emb)
        nh, dh = spec.n_heads, spec.d_model // spec.n_heads
        for blk in range(spec.n_blocks):
            p = f"blocks.{blk}"
            h = ag.layer_norm(x)
            q = self._apply(f"{p}.query", h, leaves)
            k = self._apply(f"{p}.key", h, leaves)
            v = self._apply(f"{p}.value", h, leaves)
            q, k, v = (ag.transpose(ag.reshape(z, (n, t, nh, dh)), (0, 2, 1, 3)) for z in (q, k, v))
            scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = ag.matmul(ag.softmax(scores), v)
            att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (n, t, spec.d_model))
            x = ag.add(x, self._apply(f"{p}.output", att, leaves))
            h = ag.layer_norm(x)
            h = ag.relu(self._apply(f"{p}.mlp_in", h, leaves))
            x = ag.add(x, self._apply(f"{p}.mlp_out", h, leaves))
        return ag.mean(ag.layer_norm(x), axis=1)

    def predict(self, inputs):
        out, _ = self.forward(inputs)
        return out.data

    def loss(self, inputs, targets):
        out, leaves = self.forward(inputs)
        if self.task_kind == "regression":
            loss = ag.mse(out, targets)
        else:
            loss = ag.cross_entropy(out, targets)
        return loss, out, leaves

    def loss_and_grads(self, inputs, targets):
        self.nonfinite_layer = None
        loss, out, leaves = self.loss(inputs, targets)
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        return float(loss.data), out.data, grads

    def merged(self):
        """Copy of the model with every adapter folded into its base weight."""
        layers = {name: AdaptedLinear(name, l.merged()) for name, l in self.layers.items()}
        head = None if self.head is None else {k: v.copy() for k, v in self.head.items()}
        spec = ModelSpec(**{**self.spec.__dict__, "method": "none", "adapted": []})
        return Model(spec, layers, head, self.embeddings, self.task_kind)


def _layer_plan(spec):
    """Ordered ``(name, projection, d_out, d_in)`` for every linear layer."""
    plan = []
    if spec.architecture == "mlp":
        for j, (d_in, d_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            plan.append((f"layers.{j}", "mlp_in" if j == 0 else "mlp_out", d_out, d_in))
        return plan
    d, f = spec.d_model, spec.d_model * spec.ff_mult
    for blk in range(spec.n_blocks):
        p = f"blocks.{blk}"
        plan += [(f"{p}.query", "query", d, d), (f"{p}.key", "key", d, d),
                 (f"{p}.value", "value", d, d), (f"{p}.output", "output", d, d),
                 (f"{p}.mlp_in", "mlp_in", f, d), (f"{p}.mlp_out", "mlp_out", d, f)]
    return plan


def build_model(spec, seed, task=None):
    """Draw frozen base weights and attach adapters to ``spec.adapted``.

    ``task`` supplies the output head size and, for regression tasks, the
    pretrained base weights the targets were generated from.
    """
    rng = SeededRng(seed, STREAM_MODEL)
    pretrained = task.pretrained() if task is not None else {}
    task_kind = task.kind if task is not None else "regression"
    plan = _layer_plan(spec)
    shared = SharedMatrices() if spec.shared and spec.method in ("uora", "vera") else None
    layers = {}
    for layer_id, (name, proj, d_out, d_in) in enumerate(plan):
        if name in pretrained:
            w = np.array(pretrained[name], dtype=np.float64)
            if w.shape != (d_out, d_in):
                raise ShapeError(f"pretrained weight for {name} has shape {w.shape}, expected {(d_out, d_in)}")
        else:
            w = rng.normal((d_out, d_in)) / math.sqrt(d_in)
        base = FrozenLinear(w, np.zeros(d_out) if spec.architecture == "transformer" else None)
        adapter = None
        if spec.method != "none" and proj in spec.adapted:
            if spec.method == "lora":
                adapter = LoraState.create(d_out, d_in, spec.rank, seed, layer_id)
            else:
                adapter = UoraState.create(d_out, d_in, spec.rank, seed, layer_id, spec.init_kind,
                                           spec.method, shared)
        layers[name] = AdaptedLinear(name, base, adapter)

    embeddings = None
    if spec.architecture == "transformer":
        embeddings = {"token": rng.normal((spec.vocab, spec.d_model)),
                      "position": 0.1 * rng.normal((spec.seq_len, spec.d_model))}
    head = None
    if task_kind == "classification":
        width = spec.widths[-1] if spec.architecture == "mlp" else spec.d_model
        head = {"weight": rng.normal((task.n_classes, width)) / math.sqrt(width),
                "bias": np.zeros(task.n_classes)}
    return Model(spec, layers, head, embeddings, task_kind)
