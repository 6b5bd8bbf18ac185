"""YAML run configuration: schema checks, then model/data/train construction.

A run file has four sections. `model` describes the architecture, `data`
names a dataset source, `train` maps onto TrainConfig, `output` picks the
run directory. Validation errors carry the dotted path of the offending
field so a typo in a sweep grid is findable from the message alone.

    model:
      input: [1, 28, 28]
      layers:
        - {kind: conv2d, out_ch: 24, kernel: 5}
        - {kind: relu}
        - {kind: mean_pool, window: 3}
        - {kind: flatten}
        - {kind: fully_connected, out: 10}
    data:
      kind: mnist_idx            # or cifar10_binary, blobs
      path: data/mnist
      normalize: {mean: 0.1307, std: 0.3081}
      prune_split: {size: 512, disjoint: false}
    train:
      lr: 0.5
      epsilon: 3.0               # or sigma: 1.2 (exactly one)
      delta: 1.0e-5
      clip: 1.0
      prune: {criterion: synflow, rate: 0.5, rounds: 100}
      drop: {criterion: random, rate: 0.8}
      batch_size: 256            # or q: 0.004 (exactly one)
      steps: 500                 # or epochs: 2.0 (exactly one)
      seed: 0
    output:
      dir: runs/demo
"""
from __future__ import annotations

import os

import numpy as np
import yaml

from . import data as data_mod
from .errors import ConfigurationError
from .nn import Model, build_model, init_he_uniform
from .trainer import TrainConfig

OUTPUT_DIR_ENV = "DPSPARSE_OUTPUT_DIR"

_SECTIONS = ("model", "data", "train", "output")


def load_config(path) -> dict:
    """Parse a YAML run file and check its top-level shape."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: not valid YAML: {e}")
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    for key in cfg:
        if key not in _SECTIONS:
            raise ConfigurationError(
                f"{key}: unknown section (expected one of {_SECTIONS})")
    for key in ("model", "data", "train"):
        if key not in cfg:
            raise ConfigurationError(f"{key}: required section is missing")
    return cfg


def _want(section, key, path, types, required=True, default=None):
    if not isinstance(section, dict):
        raise ConfigurationError(f"{path.rsplit('.', 1)[0]}: must be a mapping")
    if key not in section:
        if required:
            raise ConfigurationError(f"{path}: required field is missing")
        return default
    val = section[key]
    if types is not None and not isinstance(val, types):
        want = "/".join(t.__name__ for t in types)
        raise ConfigurationError(
            f"{path}: expected {want}, got {type(val).__name__} ({val!r})")
    return val


def _no_extras(section, path, allowed):
    for key in section:
        if key not in allowed:
            raise ConfigurationError(
                f"{path}.{key}: unknown field (expected one of {sorted(allowed)})")


def build_model_from(model_cfg, seed: int) -> Model:
    """model section -> initialized Model."""
    input_shape = _want(model_cfg, "input", "model.input", (list, tuple))
    layers = _want(model_cfg, "layers", "model.layers", (list,))
    _no_extras(model_cfg, "model", {"input", "layers"})
    if len(input_shape) not in (1, 3):
        raise ConfigurationError(
            f"model.input: expected [features] or [channels, h, w], "
            f"got {input_shape}")
    try:
        model = build_model(input_shape, layers)
    except (ConfigurationError, KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"model.layers: {e}")
    return init_he_uniform(model, seed)


def build_dataset_from(data_cfg):
    """data section -> (train, test, prune_split_or_None)."""
    kind = _want(data_cfg, "kind", "data.kind", (str,))
    _no_extras(data_cfg, "data",
               {"kind", "path", "normalize", "blobs", "prune_split"})
    if kind == "mnist_idx":
        path = _want(data_cfg, "path", "data.path", (str,))
        train = data_mod.load_mnist_idx(path, "train")
        test = data_mod.load_mnist_idx(path, "test")
    elif kind == "cifar10_binary":
        path = _want(data_cfg, "path", "data.path", (str,))
        train = data_mod.load_cifar10_binary(path, "train")
        test = data_mod.load_cifar10_binary(path, "test")
    elif kind == "blobs":
        blobs = _want(data_cfg, "blobs", "data.blobs", (dict,))
        _no_extras(blobs, "data.blobs",
                   {"num_classes", "n_per_class", "dim", "seed", "margin",
                    "n_test_per_class"})
        common = dict(
            num_classes=_want(blobs, "num_classes", "data.blobs.num_classes", (int,)),
            dim=_want(blobs, "dim", "data.blobs.dim", (int,)),
            margin=_want(blobs, "margin", "data.blobs.margin", (int, float),
                         required=False, default=4.0),
        )
        seed = _want(blobs, "seed", "data.blobs.seed", (int,),
                     required=False, default=0)
        n_train = _want(blobs, "n_per_class", "data.blobs.n_per_class", (int,))
        n_test = _want(blobs, "n_test_per_class", "data.blobs.n_test_per_class",
                       (int,), required=False, default=max(1, n_train // 5))
        train = data_mod.synth_blobs(n_per_class=n_train, seed=seed,
                                     split="train", **common)
        test = data_mod.synth_blobs(n_per_class=n_test, seed=seed + 1,
                                    split="test", **common)
    else:
        raise ConfigurationError(
            f"data.kind: unknown kind {kind!r} "
            f"(expected mnist_idx, cifar10_binary, or blobs)")

    norm = _want(data_cfg, "normalize", "data.normalize", (dict,),
                 required=False)
    if norm is not None:
        _no_extras(norm, "data.normalize", {"mean", "std"})
        mean = _want(norm, "mean", "data.normalize.mean", (int, float))
        std = _want(norm, "std", "data.normalize.std", (int, float))
        if std <= 0:
            raise ConfigurationError(f"data.normalize.std: must be > 0, got {std}")
        train = train.normalized(mean, std)
        test = test.normalized(mean, std)

    prune_split = None
    ps = _want(data_cfg, "prune_split", "data.prune_split", (dict,),
               required=False)
    if ps is not None:
        _no_extras(ps, "data.prune_split", {"size", "disjoint"})
        size = _want(ps, "size", "data.prune_split.size", (int,))
        disjoint = _want(ps, "disjoint", "data.prune_split.disjoint", (bool,),
                         required=False, default=False)
        if not (1 <= size <= len(train)):
            raise ConfigurationError(
                f"data.prune_split.size: must be in [1, {len(train)}], got {size}")
        tail = np.arange(len(train) - size, len(train))
        prune_split = train.subset(tail, "prune")
        if disjoint:
            train = train.subset(np.arange(len(train) - size), "train")
    return train, test, prune_split


def build_train_config(train_cfg) -> TrainConfig:
    """train section -> TrainConfig (TrainConfig re-checks the combinations)."""
    _no_extras(train_cfg, "train",
               {"lr", "epsilon", "delta", "sigma", "clip", "clip_pp", "prune",
                "drop", "batch_size", "q", "steps", "epochs", "seed",
                "eval_every", "poisson"})
    kw = dict(
        lr=_want(train_cfg, "lr", "train.lr", (int, float)),
        epsilon=_want(train_cfg, "epsilon", "train.epsilon", (int, float),
                      required=False),
        delta=_want(train_cfg, "delta", "train.delta", (int, float),
                    required=False, default=1e-5),
        sigma=_want(train_cfg, "sigma", "train.sigma", (int, float),
                    required=False),
        clip=_want(train_cfg, "clip", "train.clip", (int, float),
                   required=False, default=1.0),
        clip_pp=_want(train_cfg, "clip_pp", "train.clip_pp", (int, float),
                      required=False, default=1.0),
        batch_size=_want(train_cfg, "batch_size", "train.batch_size", (int,),
                         required=False),
        q=_want(train_cfg, "q", "train.q", (int, float), required=False),
        steps=_want(train_cfg, "steps", "train.steps", (int,), required=False),
        epochs=_want(train_cfg, "epochs", "train.epochs", (int, float),
                     required=False),
        seed=_want(train_cfg, "seed", "train.seed", (int,),
                   required=False, default=0),
        eval_every=_want(train_cfg, "eval_every", "train.eval_every", (int,),
                         required=False),
        poisson=_want(train_cfg, "poisson", "train.poisson", (bool,),
                      required=False, default=True),
    )
    prune = _want(train_cfg, "prune", "train.prune", (dict,), required=False)
    if prune is not None:
        _no_extras(prune, "train.prune", {"criterion", "rate", "rounds", "eps_pp"})
        kw["prune_criterion"] = _want(prune, "criterion", "train.prune.criterion",
                                      (str,), required=False, default="random")
        kw["prune_rate"] = _want(prune, "rate", "train.prune.rate", (int, float))
        kw["synflow_rounds"] = _want(prune, "rounds", "train.prune.rounds",
                                     (int,), required=False, default=100)
        kw["eps_pp"] = _want(prune, "eps_pp", "train.prune.eps_pp",
                             (int, float), required=False)
    drop = _want(train_cfg, "drop", "train.drop", (dict,), required=False)
    if drop is not None:
        _no_extras(drop, "train.drop", {"criterion", "rate"})
        kw["drop_criterion"] = _want(drop, "criterion", "train.drop.criterion",
                                     (str,), required=False, default="random")
        kw["drop_rate"] = _want(drop, "rate", "train.drop.rate", (int, float))
    try:
        return TrainConfig(**kw)
    except ConfigurationError as e:
        raise ConfigurationError(f"train: {e}")


def resolve_output_dir(cfg, cli_override=None) -> str:
    """Priority: CLI flag, then the environment variable, then the file."""
    if cli_override:
        return cli_override
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return env
    out = cfg.get("output") or {}
    return _want(out, "dir", "output.dir", (str,), required=False,
                 default="runs/latest")
