"""``fp8train`` command line: run, sweep-optimizer, alignment, format-dump, compare, sweep-lr."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from fp8train.numerics import FORMATS, get_format, iter_code_rows

from fp8train.harness.config import ConfigError, add_config_flags, config_from_args
from fp8train.harness.data import DataError
from fp8train.harness import experiments as ex
from fp8train.harness.train import run_training


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    art = run_training(cfg, args.out)
    _print_json({"out": str(args.out), "final_loss": art.final_loss, "diverged": art.diverged,
                 "steps": art.steps_completed})
    return 0


def _preset(make) -> dict:
    d = make(0).to_dict()
    d["seed"] = None  # the seed still has to come from the flags or the file
    return d


def cmd_sweep_optimizer(args) -> int:
    cfg = config_from_args(args, base=_preset(ex.sweep_config))
    rep = ex.optimizer_sweep(cfg, args.out)
    base = rep.baseline.final_loss
    print(f"{'m':>5} {'v':>5} {'final_loss':>12} {'gap':>8} {'v_underflow':>12} diverged")
    for r in rep.rows:
        gap = abs(r.final_loss - base) / base
        print(f"{r.m_format:>5} {r.v_format:>5} {r.final_loss:12.5f} {gap:8.2%} {r.v_underflow:12d} {r.diverged}")
    return 0


def cmd_alignment(args) -> int:
    cfg = config_from_args(args, base=_preset(ex.alignment_config), task="regression", precision="none",
                           l2_mode="coupled")
    rep = ex.alignment_experiment(cfg, tol=args.tol)
    out = asdict(rep)
    out.update(large_channels=rep.large_channels, aligned=rep.aligned)
    _print_json(out)
    if not rep.stationary:
        print(f"warning: gradient norm {rep.grad_norm:.3e} did not reach {args.tol:g} "
              f"within {rep.steps} steps", file=sys.stderr)
    return 0


def cmd_format_dump(args) -> int:
    fmt = get_format(args.format)
    f = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("bits_hex", "sign", "exponent_field", "mantissa_field", "value"))
        w.writerows(iter_code_rows(fmt))
    finally:
        if args.out:
            f.close()
    return 0


def cmd_compare(args) -> int:
    rows = ex.compare(args.runs)
    print(f"{'run':<40} {'precision':<20} {'act':<14} {'m/v':<10} {'final_loss':>11} diverged")
    for r in rows:
        loss = "nan" if r["final_loss"] is None else f"{r['final_loss']:.5f}"
        print(f"{r['run']:<40} {r['precision']:<20} {r['activation']:<14} "
              f"{r['m_format'] + '/' + r['v_format']:<10} {loss:>11} {r['diverged']}")
    return 0


def cmd_sweep_lr(args) -> int:
    cfg = config_from_args(args)
    _print_json(ex.lr_sweep(cfg, args.lrs))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fp8train", description="FP8 training emulation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    add_config_flags(r)
    r.add_argument("--out", type=Path, required=True, help="run directory")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep-optimizer", help="FP32 vs FP8 Adam moment formats")
    add_config_flags(s)
    s.add_argument("--out", type=Path, default=None)
    s.set_defaults(fn=cmd_sweep_optimizer)

    a = sub.add_parser("alignment", help="w1/w2 alignment under L2 regularization")
    add_config_flags(a)
    a.add_argument("--tol", type=float, default=1e-5)
    a.set_defaults(fn=cmd_alignment)

    f = sub.add_parser("format-dump", help="CSV of every code of a format")
    f.add_argument("format", choices=sorted(FORMATS))
    f.add_argument("--out", type=Path, default=None)
    f.set_defaults(fn=cmd_format_dump)

    c = sub.add_parser("compare", help="summarize finished run directories")
    c.add_argument("runs", nargs="+", type=Path)
    c.set_defaults(fn=cmd_compare)

    lr = sub.add_parser("sweep-lr", help="peak learning-rate sweep, SwiGLU vs Smooth-SwiGLU")
    add_config_flags(lr)
    lr.add_argument("--lrs", type=float, nargs="+", required=True)
    lr.set_defaults(fn=cmd_sweep_lr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
