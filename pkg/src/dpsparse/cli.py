"""Command line front end.

    dpsparse run <config.yaml> [--out DIR]
    dpsparse sweep <spec.yaml> [--out DIR] [--workers N]
    dpsparse calibrate --eps E --delta D --q Q --steps N
    dpsparse eval <checkpoint.npz> <dataset_path> [--kind K] [--split S]

The output directory resolves as --out, then $DPSPARSE_OUTPUT_DIR, then the
config's output.dir. calibrate prints the sigma value alone on one line.
Exit codes by failure category: 0 success, 2 configuration, 3 data format,
4 numerical, 5 calibration, 6 filesystem, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import accounting, config as config_mod, data as data_mod, experiments, trainer
from .errors import (CalibrationError, ConfigurationError, DataFormatError,
                     NumericalError)

EXIT_CODES = (
    (ConfigurationError, 2),
    (DataFormatError, 3),
    (NumericalError, 4),
    (CalibrationError, 5),
    (OSError, 6),
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dpsparse",
        description="differentially private training of sparsified networks")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log per-step progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train once from a YAML config")
    run.add_argument("config", help="path to the run config")
    run.add_argument("--out", help="output directory (beats the config file)")

    sweep = sub.add_parser("sweep", help="run a grid of configs")
    sweep.add_argument("spec", help="path to the sweep spec")
    sweep.add_argument("--out", help="output directory (beats the spec file)")
    sweep.add_argument("--workers", type=int, default=1,
                       help="parallel runs (default 1, sequential)")

    cal = sub.add_parser("calibrate",
                         help="smallest sigma meeting a privacy target")
    cal.add_argument("--eps", type=float, required=True)
    cal.add_argument("--delta", type=float, required=True)
    cal.add_argument("--q", type=float, required=True,
                     help="per-step sampling rate")
    cal.add_argument("--steps", type=int, required=True)

    ev = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    ev.add_argument("checkpoint", help="path to a checkpoint.npz")
    ev.add_argument("dataset", help="dataset path (idx directory or cifar bin)")
    ev.add_argument("--kind", choices=("mnist_idx", "cifar10_binary"),
                    default="mnist_idx")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    return p


def _cmd_run(args) -> int:
    cfg = config_mod.load_config(args.config)
    out_dir = config_mod.resolve_output_dir(cfg, args.out)
    result = experiments.run_from_config(cfg, out_dir)
    print(f"acc {result.final_acc!r} eps {result.final_eps!r} -> {out_dir}")
    return 0


def _cmd_sweep(args) -> int:
    spec = experiments.load_sweep_spec(args.spec)
    out_dir = config_mod.resolve_output_dir(spec, args.out)
    rows = experiments.run_sweep(spec, out_dir, workers=args.workers)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {out_dir}")
    return 0


def _cmd_calibrate(args) -> int:
    sigma = accounting.calibrate_sigma(
        accounting.PrivacyBudget(args.eps, args.delta), args.q, args.steps)
    print(sigma)
    return 0


def _cmd_eval(args) -> int:
    loaded = trainer.load_checkpoint(args.checkpoint)
    if args.kind == "mnist_idx":
        ds = data_mod.load_mnist_idx(args.dataset, args.split)
    else:
        ds = data_mod.load_cifar10_binary(args.dataset, args.split)
    if loaded["norm_mean"] is not None:
        ds = ds.normalized(loaded["norm_mean"], loaded["norm_std"])
    acc = trainer.evaluate(loaded["model"], ds)
    print(f"{args.split}_acc {acc!r}")
    return 0


_COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep,
             "calibrate": _cmd_calibrate, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except tuple(e for e, _ in EXIT_CODES) as exc:
        for etype, code in EXIT_CODES:
            if isinstance(exc, etype):
                print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
                return code
    except Exception as exc:  # anything unforeseen: code 1, keep the trace
        logging.exception("unexpected failure")
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
