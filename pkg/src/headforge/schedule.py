"""Diffusion noise schedule: alpha-bar table, timestep sampling, noising, loss weight.

The default schedule is the scaled-linear beta schedule of the SD v1.5
checkpoint family (T=1000, beta in [0.00085, 0.012], linear in sqrt(beta)),
with alpha_bar built by cumulative product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRangeError, ShapeError

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012

# Snap a float that is within this of an integer before ceil/floor, so that
# e.g. 0.98 * 1000 -> 980 and not 981.
_GRID_SNAP = 1e-9


def scaled_linear_alpha_bar(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    sqrt_betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_steps, dtype=np.float64)
    return np.cumprod(1.0 - sqrt_betas**2)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable alpha-bar table over `num_steps` discrete timesteps."""

    num_steps: int = DEFAULT_NUM_STEPS
    alpha_bar: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.alpha_bar is None:
            object.__setattr__(
                self,
                "alpha_bar",
                scaled_linear_alpha_bar(self.num_steps, DEFAULT_BETA_START, DEFAULT_BETA_END),
            )
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.num_steps,):
            raise ShapeError(f"alpha_bar must have length {self.num_steps}, got {ab.shape}")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) > 0.0):
            raise ValueError("alpha_bar must be monotonically non-increasing")

    @classmethod
    def from_betas(cls, num_steps: int, beta_start: float, beta_end: float) -> "DiffusionSchedule":
        return cls(num_steps, scaled_linear_alpha_bar(num_steps, beta_start, beta_end))


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) < _GRID_SNAP else x


def sample_timestep(
    schedule: DiffusionSchedule, t_range: tuple[float, float], rng: np.random.Generator
) -> int:
    """Draw an integer timestep uniformly from the fractional interval.

    The integer range is [ceil(lo*T), hi*T), so a fractional window of width
    1/T selects exactly one timestep.
    """
    lo, hi = t_range
    if not (0.0 <= lo < hi <= 1.0):
        raise InvalidRangeError(f"need 0 <= lo < hi <= 1, got ({lo}, {hi})")
    T = schedule.num_steps
    lo_int = math.ceil(_snap(lo * T))
    hi_int = math.ceil(_snap(hi * T))  # exclusive
    if lo_int >= hi_int:
        raise InvalidRangeError(f"empty integer timestep range for ({lo}, {hi}) at T={T}")
    return int(rng.integers(lo_int, hi_int))


def add_noise(schedule: DiffusionSchedule, z: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """z_t = sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps."""
    z = np.asarray(z)
    eps = np.asarray(eps)
    if z.shape != eps.shape:
        raise ShapeError(f"z shape {z.shape} != eps shape {eps.shape}")
    if not (0 <= t < schedule.num_steps):
        raise InvalidRangeError(f"timestep {t} outside [0, {schedule.num_steps})")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def sds_weight(schedule: DiffusionSchedule, t: int) -> float:
    """w(t) = sqrt(alpha_bar_t) * (1 - alpha_bar_t)."""
    if not (0 <= t < schedule.num_steps):
        raise InvalidRangeError(f"timestep {t} outside [0, {schedule.num_steps})")
    ab = schedule.alpha_bar[t]
    return float(np.sqrt(ab) * (1.0 - ab))
