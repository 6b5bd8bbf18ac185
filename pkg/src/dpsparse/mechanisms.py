"""Sensitivity bounding and Gaussian noising over the selected index set.

clip_per_sample bounds each example's contribution to L2 norm C (the global
sensitivity of the row sum is then exactly C); noisy_sum adds iid Gaussian
noise of standard deviation sigma*C to the summed rows, one entry per selected
coordinate only. Noise variance never shrinks with the mask size: a shorter
selected vector buys signal-to-noise ratio, not smaller noise.

Noise streams are counter-based: each draw site derives a fresh Philox
generator from (seed, step) so steps are independent and reproducible with no
sequential state carried between them. Draws go through Box-Muller on open
(0,1] uniforms rather than the generator's native normal path, keeping the
exact draw procedure pinned down in this file.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .nn import PerSampleGrads

_NOISE_STREAM = 0xD01E  # purpose tag separating noise keys from other rng use


def noise_generator(seed: int, step: int) -> np.random.Generator:
    """Independent per-(seed, step) generator over a counter-based engine."""
    return np.random.Generator(
        np.random.Philox(key=np.array([_NOISE_STREAM ^ np.uint64(seed),
                                       np.uint64(step)], dtype=np.uint64)))


def gaussian_draw(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws via Box-Muller; deterministic per rng state."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)          # move [0,1) to (0,1] so log never sees 0
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[:m] = r * np.cos(2.0 * np.pi * u2)
    z[m:] = r * np.sin(2.0 * np.pi * u2)
    return z[:n].reshape(shape)


def clip_per_sample(grads: PerSampleGrads, C: float) -> PerSampleGrads:
    """Scale each row to L2 norm at most C: row / max(1, ||row|| / C).

    Rows already within the bound are divided by exactly 1.0, which leaves
    them bitwise unchanged; zero rows pass through.
    """
    if C <= 0:
        raise ConfigurationError(f"clip norm must be positive, got {C}")
    norms = np.linalg.norm(grads.grads, axis=1)
    divisor = np.maximum(1.0, norms / C)
    clipped = grads.grads / divisor[:, None]
    return PerSampleGrads(grads.batch_size, clipped, grads.index_map,
                          grads.losses)


def noisy_sum(grads: PerSampleGrads, sigma: float, C: float,
              rng: np.random.Generator) -> np.ndarray:
    """Sum of (already clipped) rows plus N(0, (sigma*C)^2) per coordinate.

    sigma == 0 returns the exact sum with no draw taken. An empty batch
    (zero rows) yields pure noise, which is still a valid DP release.
    """
    if sigma < 0:
        raise ConfigurationError(f"sigma must be nonnegative, got {sigma}")
    width = grads.grads.shape[1]
    total = grads.grads.sum(axis=0) if grads.grads.shape[0] else np.zeros(width)
    if sigma == 0 or width == 0:
        return total
    return total + (sigma * C) * gaussian_draw(width, rng)


def dp_mean_update(noisy_total: np.ndarray, B: int, eta: float) -> np.ndarray:
    """Parameter delta -(eta/B) * noisy_total for the selected coordinates."""
    if B < 1:
        raise ConfigurationError(f"batch divisor must be >= 1, got {B}")
    return (-eta / B) * noisy_total
