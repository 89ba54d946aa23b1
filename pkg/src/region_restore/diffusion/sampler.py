"""Deterministic DDIM sampling over a strided subset of the schedule."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from .schedule import NoiseSchedule


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided, strictly increasing timesteps ending at T-1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([T - 1], dtype=np.int64)
    taus = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))
    return taus


def ddim_sample(
    backbone,
    text: torch.Tensor,
    schedule: NoiseSchedule,
    shape: tuple,
    steps: int,
    seed: int,
    control_hook: Optional[Callable[[torch.Tensor, int], Optional[Callable]]] = None,
    dtype: torch.dtype = torch.float32,
    z_init: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Run the eta=0 reverse process from pure Gaussian noise.

    ``control_hook(z, t)`` may return a per-site fusion callable for the
    backbone (or None); it is consulted at every step. The final update
    targets alpha_bar = 1, so the last step returns the model's clean-latent
    estimate exactly. ``z_init`` overrides the seeded starting noise (used
    for batched requests that carry one seed per item).
    """
    if z_init is None:
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)
    else:
        z = z_init.to(dtype)
    taus = strided_timesteps(schedule.T, steps)
    ab = schedule.alpha_bar
    with torch.no_grad():
        for i in range(len(taus) - 1, -1, -1):
            t = int(taus[i])
            fuse_fn = control_hook(z, t) if control_hook is not None else None
            eps_hat, _ = backbone(z, t, text, fuse_fn=fuse_fn)
            a_t = float(ab[t])
            a_prev = float(ab[int(taus[i - 1])]) if i > 0 else 1.0
            x0 = (z - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
            z = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps_hat
    return z
