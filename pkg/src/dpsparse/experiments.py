"""Run and sweep harness: config in, artifact directory out.

One run directory holds metrics.csv (fixed schema, byte-reproducible given
the same config), checkpoint.npz, and summary.txt. A sweep expands a grid of
dotted-path overrides times a seed list, runs each cell in its own
subdirectory keyed by a hash of the overrides, skips cells whose result.json
already exists (so an interrupted sweep resumes by rerunning the command),
records failures without stopping the rest, and writes results.csv plus a
per-cell aggregate.csv. Wall-clock times stay out of metrics.csv and
aggregate.csv; they live in results.csv and result.json only.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import time

import numpy as np
import yaml

from . import config as config_mod
from . import trainer
from .errors import ConfigurationError, DPSparseError

logger = logging.getLogger(__name__)


def run_from_config(cfg: dict, out_dir) -> trainer.RunMetrics:
    """Execute one training run and write its artifacts under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    tc = config_mod.build_train_config(cfg["train"])
    model = config_mod.build_model_from(cfg["model"], tc.seed)
    train_ds, test_ds, prune_split = config_mod.build_dataset_from(cfg["data"])
    t0 = time.monotonic()
    result = trainer.dp_ssgd_train(
        tc, model, train_ds, test_ds, prune_split=prune_split,
        dump_path=os.path.join(out_dir, "diverged.npz"))
    wall = time.monotonic() - t0
    trainer.write_metrics_csv(result.rows, os.path.join(out_dir, "metrics.csv"))
    trainer.save_checkpoint(os.path.join(out_dir, "checkpoint.npz"),
                            result.state, norm_mean=train_ds.norm_mean,
                            norm_std=train_ds.norm_std)
    _write_summary(os.path.join(out_dir, "summary.txt"), cfg, result, wall)
    logger.info("run finished in %.1fs: acc %.4f eps %.4f -> %s",
                wall, result.final_acc, result.final_eps, out_dir)
    return result


def _write_summary(path, cfg, result: trainer.RunMetrics, wall: float) -> None:
    rep = result.prune_report
    lines = [
        f"steps:          {result.state.step}",
        f"final test acc: {result.final_acc!r}",
        f"seed:           {result.state.seed}",
        "",
        "privacy ledger",
        f"  sigma:            {result.sigma!r}",
        f"  eps (pruning):    {result.state.eps_pp!r}",
        f"  eps (total):      {result.final_eps!r}",
        "",
        "pruning",
        f"  criterion:        {rep.criterion}",
        f"  rate:             {rep.rate!r}",
        f"  retained/layer:   {list(rep.per_layer_retained)}",
        "",
        f"wall clock: {wall:.1f}s",
    ]
    if rep.sigma_pp is not None:
        lines.insert(11, f"  sigma (pruning):  {rep.sigma_pp!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

RESULTS_COLUMNS = ("cell", "overrides", "seed", "status", "final_acc",
                   "final_eps", "sigma", "wall_clock", "error")
AGGREGATE_COLUMNS = ("cell", "overrides", "n_seeds", "acc_mean", "acc_sd",
                     "eps_mean")


def load_sweep_spec(path) -> dict:
    """A sweep file: a base run config (inline or by path), a grid of dotted
    overrides, and the seed list."""
    try:
        with open(path) as fh:
            spec = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: not valid YAML: {e}")
    if not isinstance(spec, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    for key in spec:
        if key not in ("base", "grid", "seeds", "output"):
            raise ConfigurationError(f"{key}: unknown sweep field")
    if "base" not in spec:
        raise ConfigurationError("base: required field is missing")
    base = spec["base"]
    if isinstance(base, str):
        base_path = os.path.join(os.path.dirname(os.path.abspath(path)), base)
        spec["base"] = config_mod.load_config(base_path)
    elif not isinstance(base, dict):
        raise ConfigurationError("base: must be a mapping or a config path")
    grid = spec.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigurationError("grid: must be a mapping of dotted paths to lists")
    for key, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigurationError(f"grid.{key}: must be a non-empty list")
    seeds = spec.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds \
            or not all(isinstance(s, int) for s in seeds):
        raise ConfigurationError("seeds: must be a non-empty list of integers")
    spec["grid"], spec["seeds"] = grid, seeds
    return spec


def set_dotted(cfg: dict, dotted: str, value) -> None:
    """Assign into a nested dict along a dotted path, creating levels."""
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigurationError(
                f"{dotted}: {part} is not a mapping in the base config")
        node = nxt
    node[parts[-1]] = value


def expand_grid(grid: dict):
    """Deterministic cell order: keys sorted, values in listed order."""
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def cell_key(overrides: dict) -> str:
    """Stable directory stem for one grid cell."""
    canon = json.dumps(overrides, sort_keys=True)
    return hashlib.sha1(canon.encode()).hexdigest()[:10]


def run_sweep(spec: dict, out_dir, workers: int = 1) -> list:
    """Run the whole grid; returns the results.csv rows as dicts."""
    os.makedirs(out_dir, exist_ok=True)
    cells = list(expand_grid(spec["grid"]))
    seeds = spec["seeds"]
    jobs = []
    for overrides in cells:
        for seed in seeds:
            cfg = copy.deepcopy(spec["base"])
            for dotted, value in overrides.items():
                set_dotted(cfg, dotted, value)
            set_dotted(cfg, "train.seed", int(seed))
            cell_dir = os.path.join(out_dir, "cells",
                                    f"{cell_key(overrides)}_s{seed}")
            jobs.append((cfg, overrides, seed, cell_dir))

    logger.info("sweep: %d cells x %d seeds = %d runs",
                len(cells), len(seeds), len(jobs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]

    _write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    _write_aggregate_csv(rows, os.path.join(out_dir, "aggregate.csv"))
    return rows


def _run_cell(job) -> dict:
    """One (cell, seed) run; failures become a row, not an abort."""
    cfg, overrides, seed, cell_dir = job
    marker = os.path.join(cell_dir, "result.json")
    if os.path.exists(marker):
        with open(marker) as fh:
            row = json.load(fh)
        logger.info("skipping completed cell %s", cell_dir)
        return row
    row = {"cell": os.path.basename(cell_dir).rsplit("_s", 1)[0],
           "overrides": json.dumps(overrides, sort_keys=True),
           "seed": seed, "status": "ok", "final_acc": float("nan"),
           "final_eps": float("nan"), "sigma": float("nan"),
           "wall_clock": 0.0, "error": ""}
    t0 = time.monotonic()
    try:
        result = run_from_config(cfg, cell_dir)
        row.update(final_acc=result.final_acc, final_eps=result.final_eps,
                   sigma=result.sigma)
    except DPSparseError as e:
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
        logger.warning("cell %s failed: %s", cell_dir, e)
        os.makedirs(cell_dir, exist_ok=True)
    row["wall_clock"] = round(time.monotonic() - t0, 3)
    with open(marker, "w") as fh:
        json.dump(row, fh, indent=1)
    return row


def _write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _write_aggregate_csv(rows, path) -> None:
    """Per-cell mean and population sd of accuracy over the seeds that ran."""
    by_cell = {}
    for row in rows:
        by_cell.setdefault((row["cell"], row["overrides"]), []).append(row)
    out = []
    for (cell, overrides), group in sorted(by_cell.items()):
        ok = [r for r in group if r["status"] == "ok"]
        accs = np.array([r["final_acc"] for r in ok])
        epss = np.array([r["final_eps"] for r in ok])
        out.append({"cell": cell, "overrides": overrides, "n_seeds": len(ok),
                    "acc_mean": repr(float(accs.mean())) if ok else "nan",
                    "acc_sd": repr(float(accs.std())) if ok else "nan",
                    "eps_mean": repr(float(epss.mean())) if ok else "nan"})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS)
        writer.writeheader()
        writer.writerows(out)
