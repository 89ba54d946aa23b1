"""Cosine noise schedule and the forward noising step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep cumulative signal fractions.

    ``alpha_bar[t]`` is the fraction of signal variance surviving at step t.
    Values decrease from ~1 toward the floor; entries pinned at the floor by
    clipping are allowed to repeat (tails of long schedules), everything else
    must be strictly decreasing.
    """

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T,):
            raise ValueError(f"alpha_bar must have shape ({self.T},), got {ab.shape}")
        if not (0.99 < ab[0] <= 1.0):
            raise ValueError(f"alpha_bar[0] must lie in (0.99, 1], got {ab[0]}")
        unclipped = ab > ALPHA_BAR_FLOOR
        diffs = np.diff(ab)
        if np.any(diffs > 0) or np.any(diffs[unclipped[1:]] >= 0):
            raise ValueError("alpha_bar must be non-increasing, strictly where unclipped")
        if self.T >= 8 and ab[-1] >= 0.05:
            raise ValueError(f"alpha_bar tail too large: {ab[-1]}")


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule with offset 0.008, clipped below at 1e-4."""
    if T < 2:
        raise ValueError("T must be >= 2")
    t = np.arange(T, dtype=np.float64)
    s = COSINE_OFFSET
    num = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    den = math.cos((s / (1.0 + s)) * math.pi / 2.0) ** 2
    alpha_bar = np.clip(num / den, ALPHA_BAR_FLOOR, 1.0)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def forward_noise(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is an int for a single latent or a per-sample index array whose
    leading dimension matches the batch. Works on numpy arrays and torch
    tensors alike; ``eps`` must shape-match ``z0``.
    """
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = schedule.alpha_bar
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        ti = int(t)
        if not 0 <= ti < schedule.T:
            raise ValueError(f"t={ti} outside [0, {schedule.T})")
        a = float(ab[ti])
        return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps
    idx = np.asarray(t, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= schedule.T):
        raise ValueError("t indices outside schedule range")
    a = ab[idx].reshape((-1,) + (1,) * (z0.ndim - 1))
    sqrt_a = np.sqrt(a)
    sqrt_1ma = np.sqrt(1.0 - a)
    if hasattr(z0, "new_tensor"):  # torch tensor
        sqrt_a = z0.new_tensor(sqrt_a)
        sqrt_1ma = z0.new_tensor(np.sqrt(1.0 - a))
    return sqrt_a * z0 + sqrt_1ma * eps
