import csv
import json
import statistics
import struct
import subprocess
import sys

import pytest

from oracles import tamper_section
from uora.cli import main
from uora.errors import ConfigError
from uora.experiment import (
    config_hash,
    env_overrides,
    expand_grid,
    parse_grid_arg,
    report,
    resolve_config,
    run_experiment,
)
from uora.train import final_eval, read_metrics_csv

SMALL = """
name = "small"
seeds = [0, 1]

[model]
rank = 2

[task]
kind = "low_rank_recovery"
d_out = 8
d_in = 8
true_rank = 2
n_train = 128
n_eval = 64

[train]
steps = 30
batch_size = 16
log_interval = 10

[train.reinit]
tau = 0.05
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_alpha_grid_summary(tmp_path, cfg_file):
    out = tmp_path / "alpha"
    assert main(["run", str(cfg_file), "--out", str(out), "--grid", "alpha=0.3,0.5,0.7,1.0"]) == 0
    rows = read_summary(out / "summary.csv")
    assert [r["alpha"] for r in rows] == ["0.3", "0.5", "0.7", "1.0"]
    assert all(r["n_runs"] == "2" for r in rows)
    assert list(rows[0])[:2] == ["cell", "alpha"]
    for cell in (out / "cells").iterdir():
        for run in cell.iterdir():
            m = json.loads((run / "manifest.json").read_text())
            assert m["status"] == "ok" and (run / "adapters.ckpt").exists()
            assert set(m) >= {"config_hash", "toolkit_version", "kernel_backend", "seed", "started", "finished"}


def test_init_grid_and_seed_override(tmp_path, cfg_file):
    out = tmp_path / "init"
    code = main(["run", "--config", str(cfg_file), "--out", str(out), "--seeds", "0,1,2,3,4",
                 "--grid", "init=orthogonal,xavier,kaiming,random"])
    assert code == 0
    rows = read_summary(out / "summary.csv")
    assert [r["init"] for r in rows] == ["orthogonal", "xavier", "kaiming", "random"]
    assert all(r["n_runs"] == "5" for r in rows)


def test_report_matches_brute_force(tmp_path, cfg_file):
    out = tmp_path / "rep"
    main(["run", str(cfg_file), "--out", str(out), "--grid", "k=0,1"])
    rows = report(out)
    for row in rows:
        losses = [final_eval(read_metrics_csv(p / "metrics.csv")).loss
                  for p in sorted((out / "cells" / row["cell"]).iterdir())]
        assert row["eval_loss_mean"] == pytest.approx(sum(losses) / len(losses), rel=1e-12)
        assert row["eval_loss_std"] == pytest.approx(statistics.stdev(losses), rel=1e-12)
    on_disk = read_summary(out / "summary.csv")
    assert [float(r["eval_loss_mean"]) for r in on_disk] == [r["eval_loss_mean"] for r in rows]
    best = report(out, "best")
    assert all(b["eval_loss_mean"] <= f["eval_loss_mean"] + 1e-15 for b, f in zip(best, rows))


def test_identical_reruns(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", str(cfg_file), "--out", str(a)])
    main(["run", str(cfg_file), "--out", str(b)])
    assert (a / "summary.csv").read_text() == (b / "summary.csv").read_text()
    for seed in (0, 1):
        ra = read_metrics_csv(a / "cells" / "000_base" / f"seed_{seed}" / "metrics.csv")
        rb = read_metrics_csv(b / "cells" / "000_base" / f"seed_{seed}" / "metrics.csv")
        assert [r.loss for r in ra] == [r.loss for r in rb]


def test_replay_pass_and_fault_injection(tmp_path, cfg_file, capsys):
    out = tmp_path / "ckpt"
    main(["run", str(cfg_file), "--out", str(out), "--seeds", "0", "--grid", "tau=0.5"])
    ckpt = out / "cells" / "000_tau=0.5" / "seed_0" / "adapters.ckpt"
    capsys.readouterr()
    assert main(["replay", str(ckpt)]) == 0
    assert "PASS (replayed)" in capsys.readouterr().out

    def shift(payload):
        rec = struct.Struct("<qqBq")
        assert len(payload) >= rec.size, "run produced no reinit events"
        step, dim, m, cur = rec.unpack_from(payload, 0)
        return rec.pack(step, dim, m, cur + 7) + payload[rec.size:]

    tamper_section(ckpt, b"EVNT", 0, shift)
    assert main(["replay", str(ckpt)]) == 4
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "first divergent layer" in captured.err


def test_replay_full_checkpoint_is_checksum_only(tmp_path, capsys):
    from uora.adapters import UoraState
    from uora.checkpoint import FULL, save_checkpoint

    path = tmp_path / "f.ckpt"
    save_checkpoint([UoraState.create(4, 4, 2, seed=0)], None, path, FULL)
    assert main(["replay", str(path)]) == 0
    assert "checksum only" in capsys.readouterr().out
    path.write_bytes(b"garbage")
    assert main(["replay", str(path)]) == 2


def test_params_verb(capsys):
    assert main(["params", "uora", "48", "1024", "32"]) == 0
    assert "50688 (50.7K)" in capsys.readouterr().out
    assert main(["params", "lora", "24", "768", "8"]) == 0
    assert "294912 (294.9K)" in capsys.readouterr().out
    with pytest.raises(SystemExit) as err:
        main(["params", "uora", "0", "768", "8"])
    assert err.value.code == 2


@pytest.mark.parametrize("bad", [
    "[model]\nmethod = 'dora'\n",
    "[train]\nstepz = 3\n",
    "[train.reinit]\nalpha = 2.0\n",
    "[task]\nkind = 'imagenet'\n",
    "seeds = []\n",
    "[grid]\nnot_a_field = [1, 2]\n",
    "this is not toml",
])
def test_invalid_configs_exit_2(tmp_path, bad):
    p = tmp_path / "bad.toml"
    p.write_text(bad)
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_and_bad_grid(tmp_path, cfg_file):
    assert main(["run"]) == 2
    assert main(["run", str(tmp_path / "nope.toml")]) == 2
    assert main(["run", str(cfg_file), "--grid", "alpha"]) == 2


def test_env_overrides_apply(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("UORA_SEEDS", "3")
    monkeypatch.setenv("UORA_TRAIN__STEPS", "20")
    monkeypatch.setenv("UORA_OUT", str(tmp_path / "envout"))
    assert main(["run", str(cfg_file)]) == 0
    m = json.loads((tmp_path / "envout" / "cells" / "000_base" / "seed_3" / "manifest.json").read_text())
    assert m["config"]["train"]["steps"] == 20
    assert env_overrides({"UORA_TRAIN__REINIT__ALPHA": "0.5"}) == {"train": {"reinit": {"alpha": 0.5}}}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, cfg_file):
    text = SMALL.replace("steps = 30", "steps = 30\nadapter_lr = 1e200\noptimizer = 'sgd'")
    p = tmp_path / "div.toml"
    p.write_text(text)
    out = tmp_path / "div"
    assert main(["run", str(p), "--out", str(out), "--seeds", "0"]) == 3
    m = json.loads((out / "cells" / "000_base" / "seed_0" / "manifest.json").read_text())
    assert m["status"] == "diverged" and "step" in m["error"]


def test_grid_helpers():
    assert parse_grid_arg("alpha=0.3,1") == ("alpha", [0.3, 1])
    with pytest.raises(ConfigError):
        parse_grid_arg("alpha=")
    cfg = resolve_config({"grid": {"alpha": [0.5, 1.0], "rank": [1, 2]}, "model": {"rank": 1}})
    cells = expand_grid(cfg)
    assert len(cells) == 4
    assert cells[1]["axes"] == {"train.reinit.alpha": 0.5, "model.rank": 2}
    a = {"x": 1, "y": {"b": 2, "a": 3}}
    assert config_hash(a) == config_hash({"y": {"a": 3, "b": 2}, "x": 1})


def test_run_experiment_jsonl_and_parallel(tmp_path):
    cfg = resolve_config({"seeds": [0, 1], "task": {"kind": "low_rank_recovery", "d_out": 8, "d_in": 8,
                                                    "true_rank": 2, "n_train": 64, "n_eval": 32},
                          "model": {"rank": 2}, "train": {"steps": 10}})
    rows, diverged = run_experiment(cfg, tmp_path / "p", fmt="jsonl", jobs=2)
    serial, _ = run_experiment(cfg, tmp_path / "s", fmt="csv", jobs=1)
    assert not diverged and rows[0]["eval_loss_mean"] == serial[0]["eval_loss_mean"]
    assert (tmp_path / "p" / "cells" / "000_base" / "seed_1" / "metrics.jsonl").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "uora", "params", "vera", "24", "768", "256"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "24576" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "uora", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
