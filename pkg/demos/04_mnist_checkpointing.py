"""
MNIST, checkpoints, and exact resumption
========================================

Trains a small convnet on the real IDX files for a minute, checkpoints it,
then shows that resuming reproduces a straight run bit for bit. All the
randomness is keyed by (seed, step), so a resumed stream has nothing to
remember between steps.
"""
import os
import tempfile

import numpy as np

import dpsparse as dps

HERE = os.path.dirname(os.path.abspath(__file__))
MNIST = os.path.join(HERE, os.pardir, "data", "mnist")

train = dps.load_mnist_idx(MNIST, "train").normalized(0.1307, 0.3081)
test = dps.load_mnist_idx(MNIST, "test").normalized(0.1307, 0.3081)
print(f"{len(train)} train / {len(test)} test images loaded")

LAYERS = [
    {"kind": "conv2d", "out_ch": 8, "kernel": 5}, {"kind": "relu"},
    {"kind": "mean_pool", "window": 3}, {"kind": "flatten"},
    {"kind": "fully_connected", "out": 10}]


def fresh():
    return dps.init_he_uniform(dps.build_model([1, 28, 28], LAYERS), seed=0)


cfg60 = dps.TrainConfig(lr=0.5, sigma=1.0, clip=1.0, batch_size=128,
                        steps=60, seed=0, eval_every=30)
out = dps.dp_ssgd_train(cfg60, fresh(), train, test)
print(f"after 60 private steps: test acc {out.final_acc:.4f}, "
      f"eps so far {out.final_eps:.4f}")

ckpt = os.path.join(tempfile.mkdtemp(), "demo.npz")
dps.save_checkpoint(ckpt, out.state, norm_mean=0.1307, norm_std=0.3081)
print("checkpoint written:", os.path.basename(ckpt))

# continue the run to 90 steps from the checkpoint
restored = dps.load_checkpoint(ckpt)
cfg90 = dps.TrainConfig(lr=0.5, sigma=1.0, clip=1.0, batch_size=128,
                        steps=90, seed=0, eval_every=30)
resumed = dps.dp_ssgd_train(cfg90, restored["model"], train, test,
                            resume=restored["state"])

# and train 90 steps in one go for comparison
straight = dps.dp_ssgd_train(cfg90, fresh(), train, test)
same = np.array_equal(resumed.state.model.theta.view(np.uint64),
                      straight.state.model.theta.view(np.uint64))
print(f"resumed-vs-straight 90-step weights bit-identical: {same}")
print(f"final test acc {straight.final_acc:.4f}, eps {straight.final_eps:.4f}")
