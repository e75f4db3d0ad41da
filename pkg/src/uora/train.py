"""Optimizers, the training loop and metrics records."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .adapters import UoraState
from .errors import ConfigError, DivergenceError
from .reinit import ReinitConfig, ReinitMonitor, reinit_dimension

METRICS_SCHEMA = 1
SCHEDULES = ("constant", "cosine", "linear")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    adapter_lr: float = 4e-2
    head_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    steps: int = 500
    log_interval: int = 10
    eval_interval: int = 0  # 0: evaluate only before and after training
    lr_schedule: str = "constant"
    seed: int = 0
    reinit: ReinitConfig = field(default_factory=ReinitConfig)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not (self.adapter_lr > 0 and self.head_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.steps < 1 or self.log_interval < 1:
            raise ConfigError("batch_size, steps and log_interval must be positive")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        self.betas = tuple(self.betas)
        if isinstance(self.reinit, dict):
            self.reinit = ReinitConfig(**self.reinit)


class Optimizer:
    """Adam (decoupled weight decay) or SGD over a name -> array registry.

    Head and adapter parameters get separate learning rates.
    """

    def __init__(self, params, groups, cfg):
        self.params = params
        self.groups = groups
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_scale(self, step):
        total = self.cfg.steps
        if self.cfg.lr_schedule == "cosine":
            return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
        if self.cfg.lr_schedule == "linear":
            return max(0.0, 1.0 - step / total)
        return 1.0

    def step(self, grads):
        self.t += 1
        cfg = self.cfg
        scale = self.lr_scale(self.t - 1)
        for key, p in self.params.items():
            lr = (cfg.head_lr if self.groups[key] == "head" else cfg.adapter_lr) * scale
            g = grads[key]
            if cfg.optimizer == "adam":
                kernels.adam_step(p, g, self.m[key], self.v[key], lr, cfg.betas[0], cfg.betas[1],
                                  cfg.eps, cfg.weight_decay, self.t)
            else:
                kernels.sgd_step(p, g, lr, cfg.weight_decay)

    def reset_moments(self, key, index):
        self.m[key][index] = 0.0
        self.v[key][index] = 0.0


@dataclass
class MetricsRecord:
    step: int
    split: str
    loss: float
    accuracy: float | None = None
    reinit_events: int = 0
    d_abs_min: float | None = None
    d_abs_median: float | None = None
    d_abs_max: float | None = None
    epoch: int = 0
    wall_ms: float = 0.0
    schema: int = METRICS_SCHEMA

    def as_dict(self):
        return asdict(self)


COLUMNS = [f.name for f in fields(MetricsRecord)]
COLUMNS = ["schema"] + [c for c in COLUMNS if c != "schema"]
TIMING_COLUMNS = ("wall_ms",)


def _d_summary(model):
    ds = [l.adapter.d for l in model.uora_layers()]
    if not ds:
        return None, None, None
    a = np.abs(np.concatenate(ds))
    return float(a.min()), float(np.median(a)), float(a.max())


def _loss_np(model, out, targets):
    if model.task_kind == "regression":
        diff = out - targets
        return float((diff * diff).mean()), None
    z = out - out.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = out.shape[0]
    loss = float(-logp[np.arange(n), targets].mean())
    acc = float((out.argmax(axis=-1) == targets).mean())
    return loss, acc


def evaluate(model, task, split, step=0, reinit_events=0, chunk=512):
    """Loss (and accuracy for classifiers) over a whole split. Mutates nothing."""
    x, y = task.split(split)
    n = x.shape[0]
    total_loss, total_acc = 0.0, 0.0
    for start in range(0, n, chunk):
        xs, ys = x[start:start + chunk], y[start:start + chunk]
        loss, acc = _loss_np(model, model.predict(xs), ys)
        total_loss += loss * xs.shape[0]
        if acc is not None:
            total_acc += acc * xs.shape[0]
    acc = total_acc / n if model.task_kind == "classification" else None
    dmin, dmed, dmax = _d_summary(model)
    return MetricsRecord(step, split, total_loss / n, acc, reinit_events, dmin, dmed, dmax)


def attach_monitors(model, reinit_cfg):
    """One monitor per UORA layer (VeRA layers and k == 0 get none)."""
    monitors = {}
    if reinit_cfg.enabled:
        for layer in model.uora_layers():
            if layer.adapter.method == "uora":
                monitors[layer.name] = ReinitMonitor(layer.adapter.rank, reinit_cfg, layer.adapter.layer_id)
    model.monitors = monitors
    return monitors


def _reinit_pass(model, monitors, optimizer, cfg, step):
    fired = 0
    for name, monitor in monitors.items():
        state = model.layers[name].adapter
        for i in monitor.observe(state.d, step):
            monitor.record(reinit_dimension(state, i, monitor.config, step=step))
            if cfg.reinit.reset_moments:
                optimizer.reset_moments(f"{name}.d", i)
            fired += 1
    return fired


def train(model, task, cfg, on_record=None):
    """Run ``cfg.steps`` optimizer steps; returns ``(model, records)``.

    After each step (or each epoch, per ``cfg.reinit.cadence``) every UORA
    layer's ``d`` is checked and triggered dimensions are reinitialized.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    monitors = attach_monitors(model, cfg.reinit)
    optimizer = Optimizer(model.params, model.param_groups, cfg)
    steps_per_epoch = max(1, task.n_train // min(cfg.batch_size, task.n_train))
    records = []
    events = 0
    t0 = time.perf_counter()

    def emit(rec):
        rec.wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    emit(evaluate(model, task, "eval", 0, 0))
    window_loss, window_acc, window_n = 0.0, 0.0, 0
    batches = task.batches(cfg.batch_size, cfg.seed)
    epoch = 0
    for step in range(1, cfg.steps + 1):
        epoch, x, y = next(batches)
        loss, out, grads = model.loss_and_grads(x, y)
        if not math.isfinite(loss):
            raise DivergenceError(step, model.nonfinite_layer or "loss")
        optimizer.step(grads)
        if monitors and step >= cfg.reinit.start_step:
            if cfg.reinit.cadence == "step" or step % steps_per_epoch == 0:
                events += _reinit_pass(model, monitors, optimizer, cfg, step)

        window_loss += loss
        if model.task_kind == "classification":
            window_acc += float((out.argmax(axis=-1) == y).mean())
        window_n += 1
        if step % cfg.log_interval == 0:
            dmin, dmed, dmax = _d_summary(model)
            acc = window_acc / window_n if model.task_kind == "classification" else None
            emit(MetricsRecord(step, "train", window_loss / window_n, acc, events,
                               dmin, dmed, dmax, epoch))
            window_loss, window_acc, window_n = 0.0, 0.0, 0
        if cfg.eval_interval and step % cfg.eval_interval == 0 and step != cfg.steps:
            rec = evaluate(model, task, "eval", step, events)
            rec.epoch = epoch
            emit(rec)
    rec = evaluate(model, task, "eval", cfg.steps, events)
    rec.epoch = epoch
    emit(rec)
    return model, records


def final_eval(records):
    return [r for r in records if r.split == "eval"][-1]


def best_eval(records):
    evals = [r for r in records if r.split == "eval"]
    if evals and evals[-1].accuracy is not None:
        return max(evals, key=lambda r: r.accuracy)
    return min(evals, key=lambda r: r.loss)


# -- metrics streams --------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in records:
            d = r.as_dict()
            w.writerow([_fmt(d[c]) for c in COLUMNS])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        for row in rows:
            if int(row["schema"]) != METRICS_SCHEMA:
                raise ValueError(f"{path}: metrics schema {row['schema']} is not {METRICS_SCHEMA}")
            kw = {}
            for f in fields(MetricsRecord):
                raw = row[f.name]
                if raw == "":
                    kw[f.name] = None
                elif f.name in ("step", "reinit_events", "epoch", "schema"):
                    kw[f.name] = int(raw)
                elif f.name == "split":
                    kw[f.name] = raw
                else:
                    kw[f.name] = float(raw)
            out.append(MetricsRecord(**kw))
    return out


def write_metrics_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({c: r.as_dict()[c] for c in COLUMNS}) + "\n")
