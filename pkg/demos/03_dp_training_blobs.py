"""
Private training on synthetic blobs
===================================

The full loop at desk scale: clip each example's gradient, add calibrated
Gaussian noise, update only a surviving subset of coordinates. Blobs keep it
fast enough to rerun while reading the code.
"""
import numpy as np

import dpsparse as dps

train = dps.synth_blobs(num_classes=4, n_per_class=128, dim=16, seed=0)
test = dps.synth_blobs(num_classes=4, n_per_class=32, dim=16, seed=1,
                       split="test")


def fresh_model(seed):
    m = dps.build_model([16], [
        {"kind": "fully_connected", "out": 24}, {"kind": "relu"},
        {"kind": "fully_connected", "out": 4}])
    return dps.init_he_uniform(m, seed)


# a dense private run: epsilon is the input, sigma falls out of calibration
cfg = dps.TrainConfig(lr=0.5, epsilon=2.0, delta=1e-5, clip=1.0,
                      batch_size=64, steps=150, seed=0, eval_every=50)
out = dps.dp_ssgd_train(cfg, fresh_model(0), train, test)
print(f"dense:   acc {out.final_acc:.3f}  "
      f"eps {out.final_eps:.4f}  sigma {out.sigma:.4f}")

# same budget, but drop 80% of the surviving coordinates each step; fewer
# noised coordinates per step means less injected noise energy overall
cfg_drop = dps.TrainConfig(lr=0.5, epsilon=2.0, delta=1e-5, clip=1.0,
                           batch_size=64, steps=150, seed=0, eval_every=50,
                           drop_criterion="random", drop_rate=0.8)
out_drop = dps.dp_ssgd_train(cfg_drop, fresh_model(0), train, test)
print(f"drop0.8: acc {out_drop.final_acc:.3f}  "
      f"eps {out_drop.final_eps:.4f}  sigma {out_drop.sigma:.4f}")

# and with a synflow pre-prune stacked on top
cfg_both = dps.TrainConfig(lr=0.5, epsilon=2.0, delta=1e-5, clip=1.0,
                           batch_size=64, steps=150, seed=0, eval_every=50,
                           prune_criterion="synflow", prune_rate=0.5,
                           drop_criterion="random", drop_rate=0.5)
out_both = dps.dp_ssgd_train(cfg_both, fresh_model(0), train, test)
print(f"both:    acc {out_both.final_acc:.3f}  "
      f"eps {out_both.final_eps:.4f}  "
      f"pruned {len(out_both.state.pruned)} of "
      f"{out_both.state.model.n_weights} weights")
print()

# the metrics rows are what lands in metrics.csv on disk
print("eval rows of the combined run:")
print("  " + " ".join(dps.METRICS_COLUMNS[:5]))
for row in out_both.rows:
    print(f"  {row['step']:>4} {row['epoch']:.2f} {row['train_loss']:.4f} "
          f"{row['test_acc']:.4f} {row['eps_so_far']:.4f}")
print()

# the epsilon column never decreases; spend is monotone in steps
eps = [row["eps_so_far"] for row in out_both.rows]
print("eps trajectory nondecreasing:", all(b >= a for a, b in zip(eps, eps[1:])))
