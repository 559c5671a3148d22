"""Smooth test fields: bumps, sine modes and seeded random combinations.

Random fields are drawn as continuum functions (coefficients first, then
sampled), so the same seed gives the same function on every grid.
"""
from __future__ import annotations

import numpy as np

from .geometry import Grid


def smooth_bump(grid: Grid, radius: float = 0.5, amplitude: float = 1.0, center=(0.0, 0.0)):
    """C^2 bump amplitude * (1 - (r/radius)^2)^3 on the disc, zero outside."""
    r2 = ((grid.X - center[0]) ** 2 + (grid.Y - center[1]) ** 2) / radius ** 2
    u = amplitude * np.clip(1.0 - r2, 0.0, None) ** 3
    return grid.sample(lambda X, Y: u)


def sine_mode(grid: Grid, p: int = 1, q: int = 1):
    """Dirichlet Laplacian eigenfunction sin(p pi (x+L)/2L) sin(q pi (y+L)/2L)."""
    L = grid.L
    return grid.sample(lambda X, Y: np.sin(p * np.pi * (X + L) / (2 * L))
                       * np.sin(q * np.pi * (Y + L) / (2 * L)))


def random_sine_field(grid: Grid, seed: int, modes: int = 6, decay: float = 1.0):
    """Random combination of the first ``modes`` x ``modes`` sine modes.

    Coefficients are standard normal scaled by (p^2 + q^2)^(-decay/2).
    """
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((modes, modes))
    p = np.arange(1, modes + 1)
    c /= (p[:, None] ** 2 + p[None, :] ** 2) ** (0.5 * decay)
    L = grid.L
    sx = np.sin(np.pi * np.outer(p, grid.xs + L) / (2 * L))
    return grid.sample(lambda X, Y: sx.T @ c @ sx)


def random_bump_field(grid: Grid, seed: int, bumps: int = 4, modes: int = 3,
                      near_origin: float = 0.5):
    """Gaussian bumps times the boundary factor plus low sine modes.

    A share ``near_origin`` of the bumps is centred within 0.2 L of the
    origin, where the weight degenerates.
    """
    rng = np.random.default_rng(seed)
    L = grid.L
    X, Y = grid.X, grid.Y
    b = (1 - (X / L) ** 2) * (1 - (Y / L) ** 2)
    u = np.zeros(grid.shape)
    for _ in range(bumps):
        span = 0.2 * L if rng.uniform() < near_origin else 0.7 * L
        cx, cy = rng.uniform(-span, span, 2)
        width = L * np.exp(rng.uniform(np.log(0.05), np.log(0.5)))
        u += rng.standard_normal() * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width ** 2))
    u *= b
    u += random_sine_field(grid, seed + 7919, modes=modes)
    return grid.sample(lambda X_, Y_: u)
