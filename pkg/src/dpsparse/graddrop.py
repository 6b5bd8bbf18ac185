"""Per-step selection of which surviving coordinates get a gradient update.

Selection happens inside the batch loop, so the dropped set is fresh every
step. Candidates are the live ids (pre-pruned ids never appear). Both criteria
work per layer: each layer contributes floor(rate * candidates_in_layer)
dropped ids. Magnitude selection reads only the current parameter values,
which are already private by post-processing; neither criterion sees data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .masks import IndexMask


@dataclass(frozen=True)
class DropPolicy:
    criterion: str = "random"    # random | magnitude
    rate: float = 0.0

    def __post_init__(self):
        if self.criterion not in ("random", "magnitude"):
            raise ConfigurationError(
                f"unknown grad-drop criterion {self.criterion!r}")
        if not (0.0 <= self.rate < 1.0):
            raise ConfigurationError(
                f"drop rate must lie in [0,1), got {self.rate}")


def select_random(candidates: IndexMask, rate: float,
                  rng: np.random.Generator):
    """Uniform per-layer drop; returns (dropped, selected) partitioning input."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"drop rate must lie in [0,1), got {rate}")
    dropped = []
    for _, ids in candidates.per_layer_indices():
        k = int(np.floor(rate * ids.size))
        if k:
            dropped.append(rng.choice(ids, size=k, replace=False))
    return _partition(candidates, dropped)


def select_magnitude(weights_flat: np.ndarray, candidates: IndexMask,
                     rate: float):
    """Drop the smallest-|weight| candidates per layer, ties to lower flat id."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"drop rate must lie in [0,1), got {rate}")
    dropped = []
    for _, ids in candidates.per_layer_indices():
        k = int(np.floor(rate * ids.size))
        if k:
            order = np.lexsort((ids, np.abs(weights_flat[ids])))
            dropped.append(ids[order[:k]])
    return _partition(candidates, dropped)


def _partition(candidates: IndexMask, dropped_chunks):
    if dropped_chunks:
        drop_ids = np.concatenate(dropped_chunks)
    else:
        drop_ids = np.empty(0, dtype=np.int64)
    dropped = IndexMask.from_indices(drop_ids, candidates.layer_bounds)
    selected = candidates.difference(dropped)
    return dropped, selected


def combine_removed(pruned: IndexMask, dropped: IndexMask) -> IndexMask:
    """Union of the permanent and the per-step removed sets."""
    return pruned.union(dropped)
