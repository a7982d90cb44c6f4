"""Euler integration of a learned velocity field from noise (t = 1) to data (t = 0)."""
from __future__ import annotations

from typing import Any, Protocol, Sequence

import numpy as np


class VelocityModel(Protocol):
    latent_shape: tuple[int, ...]

    def __call__(self, x_t: np.ndarray, t: float, cond: Any, e: np.ndarray) -> np.ndarray: ...


class NonFiniteSampleError(FloatingPointError):
    pass


def initial_noise(shape: Sequence[int], seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(tuple(shape))


def sample(model: VelocityModel, cond: Any, e: np.ndarray, steps: int = 8, seed=0,
           return_path: bool = False):
    """x_{t - dt} = x_t - dt * v(x_t, t) on a uniform grid t = 1, 1 - 1/steps, ..., 1/steps.

    ``seed`` is anything ``numpy.random.default_rng`` accepts. With ``return_path`` the
    list of intermediate latents (starting with the noise) is returned as well.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = initial_noise(model.latent_shape, seed)
    path = [x.copy()] if return_path else None
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(model(x, t, cond, e), dtype=np.float64)
        if v.shape != x.shape:
            raise ValueError(f"velocity shape {v.shape} does not match latent {x.shape}")
        x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise NonFiniteSampleError(f"non-finite latent after step {k} (t={t:.4f})")
        if path is not None:
            path.append(x.copy())
    return (x, path) if return_path else x
