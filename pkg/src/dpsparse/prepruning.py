"""One-shot pruning before training: random, synflow, or a DP SNIP variant.

The returned IndexMask holds the flat ids of the weights that are REMOVED.
Removal is logical: the trainer zeroes those weights and never selects them
for updates again; tensor shapes are untouched. Random and synflow pruning
read no data and spend no privacy budget. The DP SNIP criterion touches the
pruning dataset through one clipped, noised full-batch gradient query, and its
epsilon share is charged even when the resulting mask is empty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accounting
from .errors import ConfigurationError, NumericalError
from .masks import IndexMask
from .mechanisms import gaussian_draw, noise_generator
from .nn import Model, _softmax_grads, loss_cross_entropy, per_example_rows

_PRUNE_STREAM = 0x9121          # rng purpose tag for random pruning draws
_SNIP_QUERY = np.uint64(1) << 62  # step id reserved for the snip noise draw


@dataclass(frozen=True)
class PruneReport:
    criterion: str
    rate: float
    eps_spent: float
    per_layer_retained: tuple
    sigma_pp: float = None      # set only by the dp_snip path

    @staticmethod
    def from_mask(criterion, rate, eps_spent, model, mask, sigma_pp=None):
        retained = tuple(
            (stop - start) - cnt for (start, stop), cnt
            in zip(model.weight_bounds, mask.per_layer_counts))
        return PruneReport(criterion, rate, eps_spent, retained, sigma_pp)


def _check_rate(rate):
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(
            f"prune rate must lie in [0,1): removing every weight in a layer "
            f"would collapse it (got {rate})")


def random_preprune(model: Model, rate: float, rng: np.random.Generator) -> IndexMask:
    """Per layer, drop exactly floor(rate * layer_size) ids uniformly."""
    _check_rate(rate)
    dropped = []
    for start, stop in model.weight_bounds:
        n = stop - start
        k = int(np.floor(rate * n))   # k < n since rate < 1, layer survives
        if k:
            dropped.append(start + rng.choice(n, size=k, replace=False))
    ids = np.concatenate(dropped) if dropped else np.empty(0, dtype=np.int64)
    return model.mask_from(ids)


def synflow_scores(model: Model) -> np.ndarray:
    """Data-free saliency: theta * d(sum of outputs)/d(theta) on |theta|.

    Evaluated on an absolute-valued copy of the parameters with an all-ones
    input, so every score is nonnegative and the whole computation never sees
    data. If the product path overflows float64, scores are recomputed with
    per-layer max-abs rescaling; on a chain model that multiplies every score
    by the same constant, so the ranking (all pruning uses) is unchanged.
    """
    if not model.prunable_layers:
        raise ConfigurationError("model has no prunable layers")
    with np.errstate(over="ignore", invalid="ignore"):
        # the unscaled pass may deliberately overflow; that is the probe
        scores = _synflow_scores_raw(model, rescale=False)
    if not np.isfinite(scores).all():
        scores = _synflow_scores_raw(model, rescale=True)
        if not np.isfinite(scores).all():
            raise NumericalError(
                "synflow scores non-finite even after per-layer rescaling")
    return scores


def _synflow_scores_raw(model: Model, rescale: bool) -> np.ndarray:
    twin = model.copy()
    np.abs(twin.theta, out=twin.theta)
    if rescale:
        for start, stop in twin.weight_bounds:
            peak = twin.theta[start:stop].max()
            if peak > 0:
                twin.theta[start:stop] /= peak
    ones = np.ones((1,) + twin.input_shape)
    caches = []
    logits = twin.forward(ones, caches=caches)
    # objective is the plain sum of outputs: seed backprop with ones
    dlogits = np.ones((1, logits.shape[1]))
    grad = per_example_rows(twin, caches, dlogits, twin.full_mask())[0]
    return grad * twin.theta


def synflow_preprune(model: Model, rate: float, rounds: int = 100) -> IndexMask:
    """Iterative global pruning on recomputed synflow scores.

    Round r of R keeps the ceil((1-rate)^(r/R) * n) highest-scored surviving
    weights; the best-scored weight of each layer is exempt so no layer ever
    empties. A pure function of (parameters, rate, rounds): no data, no rng.
    """
    _check_rate(rate)
    if rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
    if rate == 0.0:
        return model.empty_mask()

    twin = model.copy()
    n = twin.n_weights
    alive = np.ones(n, dtype=bool)
    guard_conflicts = 0
    n_layers = len(twin.weight_bounds)
    for r in range(1, rounds + 1):
        keep = int(np.ceil((1.0 - rate) ** (r / rounds) * n))
        n_alive = int(alive.sum())
        if keep >= n_alive:
            continue
        scores = synflow_scores(twin)
        # per-layer champion ids are never pruned (layer-collapse guard)
        protected = []
        for start, stop in twin.weight_bounds:
            ids = np.flatnonzero(alive[start:stop]) + start
            if ids.size:
                best = ids[np.argmax(scores[ids])]
                protected.append(best)
        if keep < len(protected):
            guard_conflicts += 1
            if guard_conflicts > n_layers:
                raise ConfigurationError(
                    f"synflow collapse guard conflicted {guard_conflicts} "
                    f"times: rate {rate} leaves fewer than one weight per layer")
        alive_ids = np.flatnonzero(alive)
        order = np.lexsort((alive_ids, scores[alive_ids]))  # low score first
        quota = n_alive - max(keep, len(protected))
        protected = set(protected)
        for j in order:
            if quota == 0:
                break
            fid = alive_ids[j]
            if fid in protected:
                continue
            alive[fid] = False
            twin.theta[fid] = 0.0
            quota -= 1
    return model.mask_from(np.flatnonzero(~alive))


def snip_sensitivities(model: Model, images, labels, clip_norm: float,
                       sigma: float, seed: int, chunk: int = 128):
    """Noised normalized connection sensitivities over the whole split.

    Per sample, the connection gradient is theta * d(loss)/d(theta); each
    sample's vector is clipped to clip_norm, the clipped vectors are averaged
    over the full split of size B, and N(0, (sigma*clip_norm/B)^2) noise is
    added per coordinate. Returns (s, g_noised) where s = |g| / sum|g|.
    """
    if clip_norm <= 0:
        raise ConfigurationError(f"clip norm must be positive, got {clip_norm}")
    B = len(images)
    if B == 0:
        raise ConfigurationError("pruning dataset is empty")
    full = model.full_mask()
    total = np.zeros(model.n_weights)
    for lo in range(0, B, chunk):
        x, y = images[lo:lo + chunk], labels[lo:lo + chunk]
        caches = []
        logits = model.forward(x, caches=caches)
        loss_cross_entropy(logits, y)   # validates labels
        rows = per_example_rows(model, caches, _softmax_grads(logits, y), full)
        rows *= model.theta             # d loss/d connectivity, per sample
        norms = np.linalg.norm(rows, axis=1)
        rows /= np.maximum(1.0, norms / clip_norm)[:, None]
        total += rows.sum(axis=0)
    g = total / B
    if sigma > 0:
        rng = noise_generator(seed, _SNIP_QUERY)
        g = g + (sigma * clip_norm / B) * gaussian_draw(model.n_weights, rng)
    mag = np.abs(g)
    denom = mag.sum()
    s = mag / denom if denom > 0 else np.full(model.n_weights, 1.0 / len(mag))
    return s, g


def dp_snip_preprune(model: Model, images, labels, rate: float,
                     clip_norm: float, eps_pp: float, delta_p: float,
                     seed: int, sigma: float = None):
    """DP SNIP: one private sensitivity query, then global bottom-rate pruning.

    sigma, when not given, is calibrated from (eps_pp, delta_p) as a single
    full-batch Gaussian query (q=1, one step). Passing sigma explicitly
    bypasses calibration (sigma=0 gives the non-private SNIP mask). Returns
    (mask, eps_spent); eps_spent = eps_pp even for rate 0, the data was read.
    """
    _check_rate(rate)
    if sigma is None:
        budget = accounting.PrivacyBudget(eps_pp, delta_p)
        sigma = accounting.calibrate_sigma(budget, q=1.0, n_steps=1)
    s, _ = snip_sensitivities(model, images, labels, clip_norm, sigma, seed)
    k = int(np.floor(rate * model.n_weights))
    if k == 0:
        return model.empty_mask(), eps_pp
    ids = np.arange(model.n_weights)
    order = np.lexsort((ids, s))        # lowest sensitivity first, ties by id
    return model.mask_from(ids[order[:k]]), eps_pp


def preprune(model: Model, criterion: str, rate: float, seed: int,
             rounds: int = 100, prune_images=None, prune_labels=None,
             clip_norm: float = 1.0, eps_pp: float = 0.0,
             delta_p: float = accounting.DEFAULT_DELTA) -> tuple:
    """Dispatch on criterion; returns (mask, PruneReport)."""
    crit = criterion.lower()
    if crit == "random":
        rng = np.random.default_rng(
            np.random.SeedSequence([_PRUNE_STREAM, int(seed)]))
        mask = random_preprune(model, rate, rng)
        spent, sigma_pp = 0.0, None
    elif crit == "synflow":
        mask = synflow_preprune(model, rate, rounds)
        spent, sigma_pp = 0.0, None
    elif crit == "dp_snip":
        if prune_images is None:
            raise ConfigurationError("dp_snip pre-pruning needs a pruning split")
        budget = accounting.PrivacyBudget(eps_pp, delta_p)
        sigma_pp = accounting.calibrate_sigma(budget, q=1.0, n_steps=1)
        mask, spent = dp_snip_preprune(
            model, prune_images, prune_labels, rate, clip_norm,
            eps_pp, delta_p, seed, sigma=sigma_pp)
    else:
        raise ConfigurationError(f"unknown pre-prune criterion {criterion!r}")
    report = PruneReport.from_mask(crit, rate, spent, model, mask, sigma_pp)
    return mask, report
