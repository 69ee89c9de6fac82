"""Noise schedule of the v1.5 checkpoint family (scaled-linear betas)."""

from __future__ import annotations

import math

import numpy as np

NUM_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


def alpha_bar_table(num_steps: int = NUM_STEPS) -> np.ndarray:
    sqrt_betas = np.linspace(math.sqrt(BETA_START), math.sqrt(BETA_END), num_steps)
    return np.cumprod(1.0 - sqrt_betas**2)


_TABLE = alpha_bar_table()


def alpha_bar(t: int) -> float:
    if not 0 <= t < len(_TABLE):
        raise ValueError(f"timestep {t} outside [0, {len(_TABLE)})")
    return float(_TABLE[t])


def loss_weight(t: int) -> float:
    ab = alpha_bar(t)
    return math.sqrt(ab) * (1.0 - ab)
