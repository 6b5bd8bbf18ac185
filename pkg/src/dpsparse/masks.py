"""Flat-index masks over a model's weight vector.

An IndexMask is a sorted array of unique flat weight ids plus the count of ids
falling in each prunable layer. The same type carries every index set the
training loop juggles: the permanent pre-prune mask, the per-step drop mask,
the selected set, and their unions/complements.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class IndexMask:
    """Sorted unique flat indices with per-layer provenance.

    layer_bounds is the owning model's list of (start, stop) half-open flat
    ranges, one per prunable layer; per_layer_counts[k] is how many of this
    mask's indices fall into layer k's range.
    """

    indices: np.ndarray            # int64, sorted, unique
    layer_bounds: tuple            # ((start, stop), ...) for prunable layers
    per_layer_counts: tuple        # ints aligned with layer_bounds

    def __len__(self) -> int:
        return int(self.indices.size)

    @staticmethod
    def from_indices(indices, layer_bounds) -> "IndexMask":
        """Build a mask from any iterable of flat ids, validating range."""
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        n_total = layer_bounds[-1][1] if layer_bounds else 0
        if idx.size and (idx[0] < 0 or idx[-1] >= n_total):
            raise ConfigurationError(
                f"mask index out of range: have ids in [{idx[0]}, {idx[-1]}], "
                f"model has {n_total} weights")
        starts = np.array([b[0] for b in layer_bounds], dtype=np.int64)
        # searchsorted against layer starts buckets each id into its layer
        which = np.searchsorted(starts, idx, side="right") - 1
        counts = np.bincount(which, minlength=len(layer_bounds)) if idx.size \
            else np.zeros(len(layer_bounds), dtype=np.int64)
        return IndexMask(idx, tuple(tuple(b) for b in layer_bounds),
                         tuple(int(c) for c in counts))

    @staticmethod
    def empty(layer_bounds) -> "IndexMask":
        return IndexMask.from_indices(np.empty(0, dtype=np.int64), layer_bounds)

    @staticmethod
    def full(layer_bounds) -> "IndexMask":
        n_total = layer_bounds[-1][1] if layer_bounds else 0
        return IndexMask.from_indices(np.arange(n_total, dtype=np.int64),
                                      layer_bounds)

    def union(self, other: "IndexMask") -> "IndexMask":
        self._check_same_model(other)
        return IndexMask.from_indices(
            np.union1d(self.indices, other.indices), self.layer_bounds)

    def difference(self, other: "IndexMask") -> "IndexMask":
        self._check_same_model(other)
        return IndexMask.from_indices(
            np.setdiff1d(self.indices, other.indices, assume_unique=True),
            self.layer_bounds)

    def intersection(self, other: "IndexMask") -> "IndexMask":
        self._check_same_model(other)
        return IndexMask.from_indices(
            np.intersect1d(self.indices, other.indices, assume_unique=True),
            self.layer_bounds)

    def per_layer_indices(self):
        """Yield (layer_k, ids_in_layer) for each prunable layer."""
        for k, (start, stop) in enumerate(self.layer_bounds):
            lo = np.searchsorted(self.indices, start, side="left")
            hi = np.searchsorted(self.indices, stop, side="left")
            yield k, self.indices[lo:hi]

    def _check_same_model(self, other: "IndexMask") -> None:
        if self.layer_bounds != other.layer_bounds:
            raise ConfigurationError("masks belong to different models")
