"""
Pre-pruning criteria side by side
=================================

Build one small convnet and prune half of it three ways. Random needs no
data, synflow needs no data either (it scores a data-free flow proxy), and
dp_snip pays a privacy-accounted query against real examples.
"""
import numpy as np

import dpsparse as dps

model = dps.build_model([1, 8, 8], [
    {"kind": "conv2d", "out_ch": 4, "kernel": 3}, {"kind": "relu"},
    {"kind": "mean_pool", "window": 2}, {"kind": "flatten"},
    {"kind": "fully_connected", "out": 5}])
dps.init_he_uniform(model, seed=0)
print(f"{model.n_weights} weights across {len(model.weight_bounds)} prunable layers")
print()

# a 2-layer scalar chain has a closed form the synflow score must match
chain = dps.build_model([1], [{"kind": "fully_connected", "out": 1},
                              {"kind": "fully_connected", "out": 1}])
chain.theta[:] = [0.7, -1.3]
print("synflow scores on the [a, b] chain:", dps.synflow_scores(chain))
print("closed form |a*b| for both       :", abs(0.7 * -1.3))
print()

data = dps.synth_blobs(num_classes=5, n_per_class=20, dim=64, seed=1)
images = data.images.reshape(-1, 1, 8, 8)

for criterion in ("random", "synflow", "dp_snip"):
    mask, report = dps.preprune(
        model, criterion, rate=0.5, seed=0,
        prune_images=images, prune_labels=data.labels,
        eps_pp=0.5)
    kept = [stop - start - c for (start, stop), c
            in zip(mask.layer_bounds, mask.per_layer_counts)]
    print(f"{criterion:<8} pruned {len(mask):>3} ids, kept per layer {kept}, "
          f"eps spent {report.eps_spent}")

# the same seed gives the same random mask every time; masks are plain
# index sets so set algebra on them is cheap
m1, _ = dps.preprune(model, "random", 0.5, seed=42)
m2, _ = dps.preprune(model, "random", 0.5, seed=42)
m3, _ = dps.preprune(model, "random", 0.5, seed=43)
print()
print("same seed reproduces the mask:", np.array_equal(m1.indices, m2.indices))
print("another seed overlaps on",
      len(m1.intersection(m3)), "of", len(m1), "ids")
