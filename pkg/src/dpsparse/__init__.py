"""Differentially private training of sparsified neural networks.

The pipeline: prune a fraction of the weights once before training (randomly,
by a data-free connectivity score, or by a privately estimated saliency),
then each step drop a further fraction of the survivors, and run the
clip-and-noise update on the remaining coordinates only. Accounting is
Renyi-DP for the subsampled Gaussian mechanism, converted to (eps, delta)
at report time; the pruning query's budget share adds on top.

Quick tour:

    >>> import dpsparse as dps
    >>> ds = dps.synth_blobs(num_classes=3, n_per_class=64, dim=8, seed=0)
    >>> model = dps.build_model([8], [
    ...     {"kind": "fully_connected", "out": 16}, {"kind": "relu"},
    ...     {"kind": "fully_connected", "out": 3}])
    >>> dps.init_he_uniform(model, seed=0)        # doctest: +ELLIPSIS
    <...>
    >>> cfg = dps.TrainConfig(lr=0.5, epsilon=2.0, delta=1e-5, batch_size=32,
    ...                       steps=30, drop_rate=0.5)
    >>> out = dps.dp_ssgd_train(cfg, model, ds)
    >>> out.final_eps <= 2.0 + 1e-6
    True
"""

from .accounting import (AccountantState, BudgetSplit, PrivacyBudget,
                         DEFAULT_DELTA, DEFAULT_ORDERS, calibrate_sigma,
                         compose, fresh_state, rdp_step, split_budget,
                         to_eps_delta)
from .config import (OUTPUT_DIR_ENV, build_dataset_from, build_model_from,
                     build_train_config, load_config, resolve_output_dir)
from .data import (Dataset, batch_rng, load_cifar10_binary, load_mnist_idx,
                   poisson_batches, synth_blobs)
from .errors import (CalibrationError, ConfigurationError, DataFormatError,
                     DPSparseError, NumericalError)
from .experiments import load_sweep_spec, run_from_config, run_sweep
from .graddrop import DropPolicy, combine_removed, select_magnitude, select_random
from .masks import IndexMask
from .mechanisms import (clip_per_sample, dp_mean_update, gaussian_draw,
                         noise_generator, noisy_sum)
from .nn import (Model, PerSampleGrads, build_model, init_he_uniform,
                 loss_cross_entropy, per_sample_gradients)
from .prepruning import (PruneReport, dp_snip_preprune, preprune,
                         random_preprune, snip_sensitivities, synflow_preprune,
                         synflow_scores)
from .trainer import (METRICS_COLUMNS, RunMetrics, TrainConfig, TrainState,
                      apply_selected_update, dp_ssgd_train, evaluate,
                      freeze_complement, load_checkpoint, save_checkpoint,
                      write_metrics_csv)

__version__ = "0.1.0"

__all__ = [
    "AccountantState", "BudgetSplit", "PrivacyBudget", "DEFAULT_DELTA",
    "DEFAULT_ORDERS", "calibrate_sigma", "compose", "fresh_state", "rdp_step",
    "split_budget", "to_eps_delta",
    "OUTPUT_DIR_ENV", "build_dataset_from", "build_model_from",
    "build_train_config", "load_config", "resolve_output_dir",
    "Dataset", "batch_rng", "load_cifar10_binary", "load_mnist_idx",
    "poisson_batches", "synth_blobs",
    "CalibrationError", "ConfigurationError", "DataFormatError",
    "DPSparseError", "NumericalError",
    "load_sweep_spec", "run_from_config", "run_sweep",
    "DropPolicy", "combine_removed", "select_magnitude", "select_random",
    "IndexMask",
    "clip_per_sample", "dp_mean_update", "gaussian_draw", "noise_generator",
    "noisy_sum",
    "Model", "PerSampleGrads", "build_model", "init_he_uniform",
    "loss_cross_entropy", "per_sample_gradients",
    "PruneReport", "dp_snip_preprune", "preprune", "random_preprune",
    "snip_sensitivities", "synflow_preprune", "synflow_scores",
    "METRICS_COLUMNS", "RunMetrics", "TrainConfig", "TrainState",
    "apply_selected_update",
    "dp_ssgd_train", "evaluate", "freeze_complement", "load_checkpoint",
    "save_checkpoint", "write_metrics_csv",
    "__version__",
]
