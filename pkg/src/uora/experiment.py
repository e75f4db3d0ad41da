"""Declarative experiments: config files, ablation grids, per-run outputs and summaries.

A config is a TOML (or JSON) document::

    name = "alpha-sweep"
    seeds = [0, 1, 2, 3, 4]
    out = "runs/alpha"

    [model]          # ModelSpec fields
    method = "uora"
    rank = 4

    [task]           # kind + task options
    kind = "low_rank_recovery"
    d_out = 32

    [train]          # TrainConfig fields
    steps = 2000
    [train.reinit]   # ReinitConfig fields
    alpha = 0.7

    [grid]           # axis -> values; dotted paths or short aliases
    alpha = [0.3, 0.5, 0.7, 1.0]
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import math
import os
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, kernels
from .checkpoint import COMPACT, checkpoint_model
from .errors import ConfigError, DivergenceError
from .linalg import InitKind
from .models import ModelSpec, build_model
from .reinit import ReinitConfig
from .tasks import TASKS, make_task
from .train import (
    TrainConfig,
    best_eval,
    final_eval,
    read_metrics_csv,
    train,
    write_metrics_csv,
    write_metrics_jsonl,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

ALIASES = {
    "alpha": "train.reinit.alpha",
    "tau": "train.reinit.tau",
    "k": "train.reinit.count_k",
    "count_k": "train.reinit.count_k",
    "rank": "model.rank",
    "r": "model.rank",
    "init": "model.init",
    "method": "model.method",
    "lr": "train.adapter_lr",
    "adapter_lr": "train.adapter_lr",
    "steps": "train.steps",
}
SELECTIONS = ("final", "best")
FORMATS = ("csv", "jsonl")


def _defaults():
    train = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig) if f.name != "reinit"}
    train["betas"] = list(train["betas"])
    reinit = {f.name: getattr(ReinitConfig(), f.name) for f in fields(ReinitConfig)}
    train["reinit"] = reinit
    train.pop("seed")
    return {
        "name": "experiment",
        "seeds": [0],
        "out": "runs",
        "selection": "final",
        "save_checkpoints": True,
        "model": asdict(ModelSpec()),
        "task": {"kind": "low_rank_recovery"},
        "train": train,
        "grid": {},
    }


def _merge(base, over, path=""):
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base and path not in ("task.", "grid."):
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
            return raw.get("config", raw)  # accept a run manifest directly
        return tomllib.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def env_overrides(environ=None):
    """``UORA_SEEDS``, ``UORA_OUT`` and ``UORA_<SECTION>__<FIELD>`` overrides."""
    environ = os.environ if environ is None else environ
    over = {}
    for key, raw in environ.items():
        if not key.startswith("UORA_") or key == "UORA_KERNELS":
            continue
        name = key[5:].lower()
        if name == "seeds":
            over["seeds"] = [int(s) for s in raw.split(",") if s.strip()]
        elif name in ("out", "name", "selection"):
            over[name] = raw
        elif "__" in name:
            parts = name.split("__")
            node = over
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = parse_value(raw)
    return over


def parse_value(raw):
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw.strip()


def parse_grid_arg(arg):
    """``KEY=V1,V2`` -> ``(KEY, [V1, V2])``."""
    if "=" not in arg:
        raise ConfigError(f"--grid expects KEY=V1,V2,..., got {arg!r}")
    key, vals = arg.split("=", 1)
    values = [parse_value(v) for v in vals.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"--grid {key} has no values")
    return key.strip(), values


def resolve_config(raw, overrides=()):
    """Fill defaults, apply override dicts in order, validate; returns a plain dict."""
    cfg = _defaults()
    _merge(cfg, copy.deepcopy(raw))
    for over in overrides:
        if over:
            _merge(cfg, copy.deepcopy(over))
    _autofill(cfg)
    if not cfg["seeds"]:
        raise ConfigError("seeds must be a non-empty list")
    if cfg["selection"] not in SELECTIONS:
        raise ConfigError(f"selection must be one of {SELECTIONS}")
    grid = {}
    for key, values in cfg["grid"].items():
        path = ALIASES.get(key, key)
        _get_path(cfg, path)  # raises for unknown fields
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {key!r} needs a non-empty list of values")
        grid[path] = values
    cfg["grid"] = grid
    for cell in expand_grid(cfg):
        build_run_objects(cell, cfg["seeds"][0], validate_only=True)
    return cfg


def _autofill(cfg):
    task, model = cfg["task"], cfg["model"]
    if task.get("kind") not in TASKS:
        raise ConfigError(f"task.kind must be one of {sorted(TASKS)}, got {task.get('kind')!r}")
    if task["kind"] == "low_rank_recovery" and model.get("architecture") == "mlp":
        model["widths"] = [task.get("d_in", 32), task.get("d_out", 32)]
    elif task["kind"] == "gaussian_classification" and model.get("architecture") == "mlp":
        model["widths"] = [task.get("dim", 32)] + list(model["widths"][1:])
    elif task["kind"] == "seq_copy_classify":
        model["seq_len"] = task.get("seq_len", 8)
        model["vocab"] = task.get("vocab", 16)


def _get_path(cfg, path):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"grid axis {path!r} does not name a config field")
        node = node[part]
    return node


def _set_path(cfg, path, value):
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def expand_grid(cfg):
    """One resolved cell config per point of the grid (a single cell when empty)."""
    axes = list(cfg["grid"].items())
    cells = []
    for values in itertools.product(*[v for _, v in axes]) if axes else [()]:
        cell = copy.deepcopy(cfg)
        cell["grid"] = {}
        cell["axes"] = {}
        for (path, _), val in zip(axes, values):
            _set_path(cell, path, val)
            cell["axes"][path] = val
        cells.append(cell)
    return cells


def config_hash(cfg):
    """SHA-256 over canonical JSON; independent of key order."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def build_run_objects(cell, seed, validate_only=False):
    """Turn a resolved cell dict into ``(task, model spec, TrainConfig)``."""
    try:
        task_opts = {k: v for k, v in cell["task"].items() if k != "kind"}
        model = ModelSpec(**cell["model"])
        rc = dict(cell["train"]["reinit"])
        if rc.get("rand_kind") is not None:
            rk = rc["rand_kind"]
            rc["rand_kind"] = InitKind(rk) if isinstance(rk, str) else InitKind(**rk)
        reinit = ReinitConfig(**rc)
        tr = {k: v for k, v in cell["train"].items() if k != "reinit"}
        tcfg = TrainConfig(**tr, seed=seed, reinit=reinit)
        task = None if validate_only else make_task(cell["task"]["kind"], seed, **task_opts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return task, model, tcfg


def cell_id(index, cell):
    parts = [f"{path.split('.')[-1]}={val}" for path, val in cell["axes"].items()]
    label = "_".join(parts) if parts else "base"
    return f"{index:03d}_" + re.sub(r"[^A-Za-z0-9=._-]+", "-", label)


def _now():
    return datetime.now(timezone.utc).isoformat()


def execute_run(cell, seed, run_dir, fmt="csv"):
    """Train one (cell, seed); writes metrics, manifest and checkpoint into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    task, spec, tcfg = build_run_objects(cell, seed)
    model = build_model(spec, seed, task)
    records = []
    status, error = "ok", None
    try:
        train(model, task, tcfg, on_record=records.append)
    except DivergenceError as exc:
        status, error = "diverged", str(exc)
    metrics_csv = run_dir / "metrics.csv"
    write_metrics_csv(records, metrics_csv)
    files = {"metrics_csv": str(metrics_csv)}
    if fmt == "jsonl":
        write_metrics_jsonl(records, run_dir / "metrics.jsonl")
        files["metrics_jsonl"] = str(run_dir / "metrics.jsonl")
    if status == "ok" and cell.get("save_checkpoints", True) and model.adapted_layers():
        ckpt = run_dir / "adapters.ckpt"
        checkpoint_model(model, ckpt, COMPACT)
        files["checkpoint"] = str(ckpt)
    run_cfg = copy.deepcopy(cell)
    run_cfg["seeds"] = [seed]
    run_cfg.pop("axes", None)
    manifest = {
        "config_hash": config_hash(run_cfg),
        "toolkit_version": __version__,
        "kernel_backend": kernels.backend_name(),
        "seed": seed,
        "axes": cell.get("axes", {}),
        "status": status,
        "error": error,
        "started": started,
        "finished": _now(),
        "files": files,
        "config": run_cfg,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"seed": seed, "status": status, "error": error, "dir": str(run_dir)}


def _run_job(args):
    return execute_run(*args)


SUMMARY_FIELDS = ["cell", "n_runs", "selection", "eval_loss_mean", "eval_loss_std",
                  "eval_accuracy_mean", "eval_accuracy_std", "reinit_events_mean", "adapter_params"]


def _mean_std(values):
    if not values:
        return None, None
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else None
    return mean, std


def summarize_cell(cell_name, axes, run_dirs, selection="final"):
    """Aggregate completed runs of one cell from their metrics CSV files."""
    losses, accs, events = [], [], []
    for d in run_dirs:
        manifest = json.loads((Path(d) / "manifest.json").read_text())
        if manifest["status"] != "ok":
            continue
        recs = read_metrics_csv(Path(d) / "metrics.csv")
        pick = best_eval(recs) if selection == "best" else final_eval(recs)
        losses.append(pick.loss)
        if pick.accuracy is not None:
            accs.append(pick.accuracy)
        events.append(final_eval(recs).reinit_events)
    lm, ls = _mean_std(losses)
    am, as_ = _mean_std(accs)
    row = {"cell": cell_name}
    row.update({k.split(".")[-1]: v for k, v in axes.items()})
    row.update({"n_runs": len(losses), "selection": selection, "eval_loss_mean": lm,
                "eval_loss_std": ls, "eval_accuracy_mean": am, "eval_accuracy_std": as_,
                "reinit_events_mean": statistics.fmean(events) if events else None})
    return row


def _cell_adapter_params(cell):
    _, spec, _ = build_run_objects(cell, 0, validate_only=True)
    # only shapes matter, so any seed will do
    task = make_task(cell["task"]["kind"], 0, **{k: v for k, v in cell["task"].items() if k != "kind"})
    return build_model(spec, 0, task).adapter_param_count()


def write_summary(rows, path):
    """Write the summary CSV to ``path`` (a filename or an open text stream)."""
    if hasattr(path, "write"):
        return _write_summary(rows, path)
    with open(path, "w", newline="") as fh:
        return _write_summary(rows, fh)


def _write_summary(rows, fh):
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    axis_keys = [k for k in keys if k not in SUMMARY_FIELDS]
    cols = ["cell"] + axis_keys + [k for k in SUMMARY_FIELDS if k != "cell"]
    w = csv.writer(fh)
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in cols])
    return cols


def run_experiment(cfg, out_dir=None, fmt="csv", jobs=1):
    """Execute every grid cell x seed; returns ``(summary_rows, any_diverged)``."""
    if fmt not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}")
    out = Path(out_dir or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_grid(cfg)
    names = [cell_id(i, c) for i, c in enumerate(cells)]
    jobs_list = [(cell, seed, out / "cells" / name / f"seed_{seed}", fmt)
                 for name, cell in zip(names, cells) for seed in cfg["seeds"]]
    started = _now()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_list))
    else:
        results = [_run_job(j) for j in jobs_list]
    rows = []
    for name, cell in zip(names, cells):
        dirs = [out / "cells" / name / f"seed_{s}" for s in cfg["seeds"]]
        row = summarize_cell(name, cell["axes"], dirs, cfg["selection"])
        row["adapter_params"] = _cell_adapter_params(cell)
        rows.append(row)
    write_summary(rows, out / "summary.csv")
    manifest = {
        "config_hash": config_hash(cfg),
        "toolkit_version": __version__,
        "kernel_backend": kernels.backend_name(),
        "started": started,
        "finished": _now(),
        "cells": names,
        "runs": results,
        "summary": str(out / "summary.csv"),
        "config": cfg,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return rows, any(r["status"] != "ok" for r in results)


def report(out_dir, selection=None):
    """Recompute the summary table from the per-run metrics under ``out_dir``."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = manifest["config"]
    selection = selection or cfg["selection"]
    rows = []
    for name, cell in zip(manifest["cells"], expand_grid(cfg)):
        dirs = [out / "cells" / name / f"seed_{s}" for s in cfg["seeds"]]
        row = summarize_cell(name, cell["axes"], dirs, selection)
        row["adapter_params"] = _cell_adapter_params(cell)
        rows.append(row)
    return rows


def format_table(rows):
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6g}" if math.isfinite(v) else str(v)
        return str(v)

    table = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(t, widths)) for t in table]
    return "\n".join(lines)
