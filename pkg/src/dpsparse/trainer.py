"""The sparse DP-SGD training loop.

Order of one run: prune once (permanent mask, weights zeroed), split the
privacy budget, calibrate sigma for the planned step count, then per batch:
pick the step's drop set among surviving ids, compute per-sample gradients
restricted to the selected ids, clip per sample, add Gaussian noise to the
sum, apply -(lr/B) times the noisy sum to the selected coordinates only, and
advance the accountant. Non-selected coordinates are bitwise untouched: the
only write path into the parameter vector is fancy-indexed addition at the
selected ids.

The reported epsilon is the training phase's RDP conversion plus the pruning
query's share, composed by plain epsilon addition at the shared delta.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import accounting, data as data_mod, graddrop, mechanisms, prepruning
from .errors import ConfigurationError, NumericalError
from .masks import IndexMask
from .nn import Model, build_model, per_sample_gradients

logger = logging.getLogger(__name__)

_DROP_STREAM = 0xD209

METRICS_COLUMNS = ("step", "epoch", "train_loss", "test_acc", "eps_so_far",
                   "pi_pp", "pi_gd", "sigma", "seed")

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Everything one run needs. Exactly one of (epsilon, sigma) and one of
    (batch_size, q) and one of (steps, epochs) must be set."""

    lr: float
    epsilon: float = None
    delta: float = accounting.DEFAULT_DELTA
    sigma: float = None
    clip: float = 1.0
    clip_pp: float = 1.0
    prune_criterion: str = "random"
    prune_rate: float = 0.0
    synflow_rounds: int = 100
    eps_pp: float = None          # dp_snip share; None = 0.1 * epsilon
    drop_criterion: str = "random"
    drop_rate: float = 0.0
    batch_size: int = None
    q: float = None
    steps: int = None
    epochs: float = None
    seed: int = 0
    eval_every: int = None
    poisson: bool = True

    def __post_init__(self):
        if (self.epsilon is None) == (self.sigma is None):
            raise ConfigurationError(
                "exactly one of a target epsilon or an explicit sigma is required")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if not (0 < self.delta < 1):
            raise ConfigurationError(f"delta must be in (0,1), got {self.delta}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.clip <= 0 or self.clip_pp <= 0:
            raise ConfigurationError("clip norms must be > 0")
        for name, rate in (("prune_rate", self.prune_rate),
                           ("drop_rate", self.drop_rate)):
            if not (0.0 <= rate < 1.0):
                raise ConfigurationError(f"{name} must lie in [0,1), got {rate}")
        if (self.batch_size is None) == (self.q is None):
            raise ConfigurationError(
                "exactly one of batch_size or sampling rate q is required")
        if (self.steps is None) == (self.epochs is None):
            raise ConfigurationError(
                "exactly one of steps or epochs is required")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        graddrop.DropPolicy(self.drop_criterion, self.drop_rate)  # validates

    def resolve(self, n_data: int):
        """Concrete (q, nominal batch size, total steps) for a dataset size."""
        if self.q is not None:
            q = float(self.q)
            if not (0 < q <= 1):
                raise ConfigurationError(f"q must be in (0,1], got {q}")
            b_nom = max(1, round(q * n_data))
        else:
            if not (1 <= self.batch_size <= n_data):
                raise ConfigurationError(
                    f"batch_size must be in [1, {n_data}], got {self.batch_size}")
            b_nom = int(self.batch_size)
            q = b_nom / n_data
        if self.steps is not None:
            steps = int(self.steps)
        else:
            steps = max(1, round(self.epochs / q))
        if steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {steps}")
        return q, b_nom, steps


@dataclass
class TrainState:
    """Mutable loop state, also the unit a checkpoint snapshots."""

    model: Model
    pruned: IndexMask
    accountant: accounting.AccountantState
    eps_pp: float
    step: int
    seed: int
    rng_state: dict = field(default_factory=dict, repr=False)


@dataclass
class RunMetrics:
    rows: list                 # dicts keyed by METRICS_COLUMNS
    final_eps: float
    final_acc: float
    sigma: float
    prune_report: prepruning.PruneReport
    state: TrainState


def evaluate(model: Model, dataset: data_mod.Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy; eval data carries no privacy cost."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.images[lo:lo + batch_size])
        hits += int((np.argmax(logits, axis=1)
                     == dataset.labels[lo:lo + batch_size]).sum())
    return hits / len(dataset)


def apply_selected_update(model: Model, selected: IndexMask,
                          delta: np.ndarray) -> None:
    """theta[selected] += delta; every other coordinate is bitwise untouched."""
    if selected.layer_bounds != model.weight_bounds:
        raise ConfigurationError("selected mask does not belong to this model")
    if len(selected) != delta.shape[0]:
        raise ConfigurationError(
            f"delta length {delta.shape[0]} vs {len(selected)} selected ids")
    model.theta[selected.indices] += delta


def freeze_complement(model: Model, non_selected: IndexMask) -> None:
    """The freeze half of the update contract. Freezing means not writing, so
    this only validates; it exists to make the invariant a named operation."""
    if non_selected.layer_bounds != model.weight_bounds:
        raise ConfigurationError("mask does not belong to this model")


def dp_ssgd_train(config: TrainConfig, model: Model,
                  train: data_mod.Dataset, test: data_mod.Dataset = None,
                  prune_split: data_mod.Dataset = None,
                  step_hook=None, resume: TrainState = None,
                  dump_path=None) -> RunMetrics:
    """Run the full loop; returns metrics and the final state.

    prune_split defaults to the training split (the private query is charged
    either way). step_hook(state, info) fires after every step with info keys
    step/selected/dropped/batch_size. resume continues a checkpointed state:
    pruning and calibration are skipped, streams pick up where they left off.
    """
    q, b_nom, total_steps = config.resolve(len(train))
    eval_every = config.eval_every or max(1, round(1.0 / q))

    if resume is None:
        prune_data = prune_split if prune_split is not None else train
        eps_pp_budget = 0.0
        if config.prune_criterion == "dp_snip":
            if config.epsilon is not None:
                split = accounting.split_budget(
                    accounting.PrivacyBudget(config.epsilon, config.delta),
                    "dp_snip", config.eps_pp)
                eps_pp_budget = split.eps_pp
            else:
                if config.eps_pp is None:
                    raise ConfigurationError(
                        "dp_snip with explicit sigma needs an explicit eps_pp")
                eps_pp_budget = config.eps_pp
        pruned, prune_report = prepruning.preprune(
            model, config.prune_criterion, config.prune_rate, config.seed,
            rounds=config.synflow_rounds,
            prune_images=prune_data.images, prune_labels=prune_data.labels,
            clip_norm=config.clip_pp, eps_pp=eps_pp_budget,
            delta_p=config.delta)
        model.theta[pruned.indices] = 0.0

        if config.sigma is not None:
            sigma = config.sigma
        else:
            eps_gd = config.epsilon - prune_report.eps_spent
            sigma = accounting.calibrate_sigma(
                accounting.PrivacyBudget(eps_gd, config.delta), q, total_steps)
        if sigma > 0:
            acct = accounting.fresh_state(sigma, q)
        else:
            acct = None     # sigma 0 admits no finite epsilon; nothing to track
        state = TrainState(model, pruned, acct, prune_report.eps_spent, 0,
                           config.seed)
        batch_gen = data_mod.batch_rng(config.seed)
        drop_gen = np.random.default_rng(
            np.random.SeedSequence([_DROP_STREAM, int(config.seed)]))
    else:
        state = resume
        model = state.model
        pruned = state.pruned
        sigma = state.accountant.sigma if state.accountant else 0.0
        prune_report = prepruning.PruneReport.from_mask(
            config.prune_criterion, config.prune_rate, state.eps_pp, model,
            pruned)
        batch_gen = data_mod.batch_rng(config.seed)
        drop_gen = np.random.default_rng(
            np.random.SeedSequence([_DROP_STREAM, int(config.seed)]))
        batch_gen.bit_generator.state = state.rng_state["batch"]
        drop_gen.bit_generator.state = state.rng_state["drop"]

    live = model.full_mask().difference(pruned)
    if len(live) == 0:
        raise ConfigurationError("pruning left no trainable weights")
    batches = data_mod.poisson_batches(train, q, batch_gen)

    rows = []
    losses_since_eval = []
    logger.info("training: %d steps, q=%.5g, sigma=%.5g, %d/%d weights live",
                total_steps, q, sigma, len(live), model.n_weights)

    for t in range(state.step, total_steps):
        if config.poisson:
            batch_idx = next(batches)
        else:
            batch_idx = batch_gen.choice(len(train), size=b_nom, replace=False)

        if config.drop_rate > 0:
            if config.drop_criterion == "magnitude":
                dropped, selected = graddrop.select_magnitude(
                    model.theta, live, config.drop_rate)
            else:
                dropped, selected = graddrop.select_random(
                    live, config.drop_rate, drop_gen)
        else:
            dropped, selected = model.empty_mask(), live

        if batch_idx.size:
            try:
                grads = per_sample_gradients(model, train.images[batch_idx],
                                             train.labels[batch_idx], selected)
            except NumericalError:
                _dump_state(state, dump_path)
                raise
            batch_loss = float(grads.losses.mean())
            if not np.isfinite(batch_loss):
                _dump_state(state, dump_path)
                raise NumericalError(
                    f"loss diverged at step {t} (mean {batch_loss})"
                    + (f"; state dumped to {dump_path}" if dump_path else ""))
            losses_since_eval.append(batch_loss)
            grads = mechanisms.clip_per_sample(grads, config.clip)
        else:   # empty Poisson batch: zero signal, noise still released
            grads = per_sample_gradients(
                model, train.images[:0], train.labels[:0], selected)

        noisy = mechanisms.noisy_sum(
            grads, sigma, config.clip, mechanisms.noise_generator(config.seed, t))
        delta = mechanisms.dp_mean_update(noisy, b_nom, config.lr)
        apply_selected_update(model, selected, delta)
        freeze_complement(model, live.difference(selected))
        if state.accountant is not None:
            state.accountant = accounting.compose(state.accountant, 1)
        state.step = t + 1

        state.rng_state = {"batch": batch_gen.bit_generator.state,
                           "drop": drop_gen.bit_generator.state}
        if step_hook is not None:
            step_hook(state, {"step": t, "selected": selected,
                              "dropped": dropped,
                              "batch_size": int(batch_idx.size)})

        if (t + 1) % eval_every == 0 or t + 1 == total_steps:
            eps_now = _eps_so_far(state, config.delta)
            if config.epsilon is not None and t + 1 < total_steps \
                    and eps_now > config.epsilon + 1e-9:
                raise ConfigurationError(
                    f"privacy budget exhausted at step {t + 1} of "
                    f"{total_steps}: eps {eps_now:.6g} > {config.epsilon}")
            train_loss = float(np.mean(losses_since_eval)) \
                if losses_since_eval else float("nan")
            losses_since_eval = []
            acc = evaluate(model, test) if test is not None else float("nan")
            rows.append({"step": t + 1, "epoch": (t + 1) * q,
                         "train_loss": train_loss, "test_acc": acc,
                         "eps_so_far": eps_now,
                         "pi_pp": config.prune_rate, "pi_gd": config.drop_rate,
                         "sigma": sigma, "seed": config.seed})
            logger.info("step %d/%d loss %.4f acc %.4f eps %.4f",
                        t + 1, total_steps, train_loss, acc, eps_now)

    final_eps = _eps_so_far(state, config.delta)
    final_acc = rows[-1]["test_acc"] if rows else float("nan")
    return RunMetrics(rows, final_eps, final_acc, sigma, prune_report, state)


def _eps_so_far(state: TrainState, delta: float) -> float:
    if state.accountant is None:      # sigma == 0: no finite guarantee
        return float("inf") if state.step > 0 else state.eps_pp
    return accounting.to_eps_delta(state.accountant, delta) + state.eps_pp


def _dump_state(state: TrainState, dump_path) -> None:
    if dump_path is None:
        return
    try:
        save_checkpoint(dump_path, state)
    except OSError:
        logger.exception("could not write divergence dump to %s", dump_path)


# ---------------------------------------------------------------------------
# metrics and checkpoints
# ---------------------------------------------------------------------------

def write_metrics_csv(rows, path) -> None:
    """Fixed-schema CSV; float fields use repr so reruns are byte-identical."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def save_checkpoint(path, state: TrainState, norm_mean=None, norm_std=None) -> None:
    """Versioned binary snapshot: architecture, weights, mask, accounting."""
    model = state.model
    arch = {"input": list(model.input_shape), "layers": model.spec_dicts()}
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "arch_json": np.array(json.dumps(arch)),
        "theta": model.theta,
        "pruned_ids": state.pruned.indices,
        "eps_pp": np.float64(state.eps_pp),
        "step": np.int64(state.step),
        "seed": np.int64(state.seed),
        "rng_json": np.array(json.dumps(state.rng_state, default=int)),
        "norm_mean": np.float64(np.nan if norm_mean is None else norm_mean),
        "norm_std": np.float64(np.nan if norm_std is None else norm_std),
    }
    if state.accountant is not None:
        payload["acct_orders"] = np.asarray(state.accountant.orders)
        payload["acct_rdp"] = state.accountant.rdp_eps
        payload["acct_steps"] = np.int64(state.accountant.steps)
        payload["acct_q"] = np.float64(state.accountant.q)
        payload["acct_sigma"] = np.float64(state.accountant.sigma)
    for k, i in enumerate(model.prunable_layers):
        if model.layers[i].b is not None:
            payload[f"bias_{k}"] = model.layers[i].b
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> dict:
    """Rebuild model + state from a checkpoint; returns a plain dict."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"checkpoint version {version} not supported "
                f"(expected {CHECKPOINT_VERSION})")
        arch = json.loads(str(z["arch_json"]))
        model = build_model(arch["input"], arch["layers"])
        model.theta[...] = z["theta"]
        for k, i in enumerate(model.prunable_layers):
            if f"bias_{k}" in z:
                model.layers[i].b[...] = z[f"bias_{k}"]
        pruned = model.mask_from(z["pruned_ids"])
        acct = None
        if "acct_orders" in z:
            acct = accounting.AccountantState(
                tuple(z["acct_orders"]), z["acct_rdp"].copy(),
                int(z["acct_steps"]), float(z["acct_q"]),
                float(z["acct_sigma"]))
        state = TrainState(model, pruned, acct, float(z["eps_pp"]),
                           int(z["step"]), int(z["seed"]),
                           json.loads(str(z["rng_json"])))
        norm_mean = float(z["norm_mean"])
        norm_std = float(z["norm_std"])
    return {"model": model, "state": state,
            "norm_mean": None if np.isnan(norm_mean) else norm_mean,
            "norm_std": None if np.isnan(norm_std) else norm_std}
