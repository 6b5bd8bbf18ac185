"""
Grid sweeps and their artifacts
===============================

A sweep is a base config, a grid of dotted-path overrides, and a seed list.
Each (cell, seed) run lands in its own directory with a result.json marker,
so rerunning the same sweep after an interruption only executes what is
missing. The same thing is reachable from the shell:

    dpsparse sweep spec.yaml --out runs/demo_sweep
"""
import csv
import os
import tempfile
import time

import dpsparse as dps
from dpsparse import experiments

BASE = {
    "model": {"input": [16], "layers": [
        {"kind": "fully_connected", "out": 24}, {"kind": "relu"},
        {"kind": "fully_connected", "out": 4}]},
    "data": {"kind": "blobs",
             "blobs": {"num_classes": 4, "n_per_class": 64, "dim": 16,
                       "n_test_per_class": 48}},
    "train": {"lr": 0.5, "epsilon": 2.0, "delta": 1e-5, "batch_size": 64,
              "steps": 80},
}

spec = {"base": BASE,
        "grid": {"train.lr": [0.25, 0.5, 1.0],
                 "train.drop.rate": [0.0, 0.8]},
        "seeds": [0, 1]}

out = os.path.join(tempfile.mkdtemp(), "sweep")
t0 = time.monotonic()
rows = experiments.run_sweep(spec, out)
print(f"{len(rows)} runs in {time.monotonic() - t0:.1f}s "
      f"({sum(r['status'] != 'ok' for r in rows)} failed)")
print()

with open(os.path.join(out, "aggregate.csv"), newline="") as fh:
    agg = list(csv.DictReader(fh))
print("cell means over 2 seeds:")
for row in sorted(agg, key=lambda r: r["overrides"]):
    print(f"  {row['overrides']:<44} "
          f"acc {float(row['acc_mean']):.3f} +- {float(row['acc_sd']):.3f}")
print()

# run it again: every cell is already on disk, so this is near-instant
t0 = time.monotonic()
experiments.run_sweep(spec, out)
print(f"rerun over finished cells took {time.monotonic() - t0:.2f}s")
