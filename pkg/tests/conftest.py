import os

import numpy as np
import pytest

import dpsparse as dps

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(REPO, "data", "mnist")


@pytest.fixture(scope="session")
def mnist_dir():
    return MNIST_DIR


@pytest.fixture
def tiny_mlp():
    """8 -> 6 -> 3 fully connected stack, seeded init."""
    model = dps.build_model([8], [
        {"kind": "fully_connected", "out": 6}, {"kind": "relu"},
        {"kind": "fully_connected", "out": 3}])
    return dps.init_he_uniform(model, seed=7)


@pytest.fixture
def tiny_cnn():
    """One conv, one pool, one fc head on a 1x8x8 input."""
    model = dps.build_model([1, 8, 8], [
        {"kind": "conv2d", "out_ch": 3, "kernel": 3}, {"kind": "relu"},
        {"kind": "mean_pool", "window": 2}, {"kind": "flatten"},
        {"kind": "fully_connected", "out": 4}])
    return dps.init_he_uniform(model, seed=11)


@pytest.fixture
def blob_data():
    train = dps.synth_blobs(num_classes=3, n_per_class=64, dim=8, seed=3)
    test = dps.synth_blobs(num_classes=3, n_per_class=16, dim=8, seed=4,
                           split="test")
    return train, test
