"""Command line front end: ``uora run | params | replay | report``.

Exit codes: 0 success, 2 invalid input, 3 training diverged (partial
results kept), 4 checkpoint replay mismatch.
"""
from __future__ import annotations

import argparse
import os
import sys

from .adapters import count_params
from .checkpoint import verify_checkpoint
from .errors import ConfigError, DecodeError, VersionError
from .experiment import (
    FORMATS,
    SELECTIONS,
    env_overrides,
    format_table,
    load_config_file,
    parse_grid_arg,
    report,
    resolve_config,
    run_experiment,
    write_summary,
)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be a positive integer")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="uora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment config (all grid cells x seeds)")
    run.add_argument("config_path", nargs="?", help="config file (same as --config)")
    run.add_argument("--config", dest="config_opt")
    run.add_argument("--out", help="output directory (overrides config 'out')")
    run.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    run.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                     help="add or replace a grid axis; repeatable")
    run.add_argument("--format", choices=FORMATS, default=os.environ.get("UORA_FORMAT", "csv"))
    run.add_argument("--jobs", type=_positive_int, default=int(os.environ.get("UORA_JOBS", "1")))
    run.add_argument("--selection", choices=SELECTIONS)

    params = sub.add_parser("params", help="trainable-parameter count for an adapter method")
    params.add_argument("method", choices=("lora", "vera", "uora"))
    params.add_argument("L_tuned", type=_positive_int)
    params.add_argument("d_model", type=_positive_int)
    params.add_argument("r", type=_positive_int)

    replay = sub.add_parser("replay", help="rebuild and checksum a checkpoint")
    replay.add_argument("checkpoint")

    rep = sub.add_parser("report", help="recompute and print the summary of a finished run")
    rep.add_argument("run_dir")
    rep.add_argument("--selection", choices=SELECTIONS)
    rep.add_argument("--format", choices=("table", "csv"), default="table")
    rep.add_argument("--out", help="also write the recomputed summary CSV here")
    return p


def cmd_run(args):
    path = args.config_opt or args.config_path
    if not path:
        print("error: run needs a config file (--config PATH)", file=sys.stderr)
        return EXIT_INVALID
    try:
        raw = load_config_file(path)
        cli = {}
        if args.seeds:
            cli["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        if args.out:
            cli["out"] = args.out
        if args.selection:
            cli["selection"] = args.selection
        if args.grid:
            cli["grid"] = dict(parse_grid_arg(g) for g in args.grid)
        cfg = resolve_config(raw, [env_overrides(), cli])
    except (ConfigError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rows, diverged = run_experiment(cfg, fmt=args.format, jobs=args.jobs)
    print(format_table(rows))
    if diverged:
        print("one or more runs diverged; partial results kept", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_params(args):
    rep = count_params(args.method, args.L_tuned, args.d_model, args.r)
    print(f"{rep.method} L_tuned={rep.L_tuned} d_model={rep.d_model} r={rep.r}: "
          f"{rep.trainable_count} ({rep.human()})")
    return EXIT_OK


def cmd_replay(args):
    try:
        checks = verify_checkpoint(args.checkpoint)
    except (DecodeError, VersionError, OSError) as exc:
        print(f"cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for c in checks:
        print(c.describe())
    failed = [c for c in checks if not c.ok]
    if failed:
        print(f"first divergent layer: {failed[0].layer_id}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_report(args):
    try:
        rows = report(args.run_dir, args.selection)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot read run directory: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.out:
        write_summary(rows, args.out)
    if args.format == "csv":
        write_summary(rows, sys.stdout)
    else:
        print(format_table(rows))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    return {"run": cmd_run, "params": cmd_params, "replay": cmd_replay, "report": cmd_report}[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
