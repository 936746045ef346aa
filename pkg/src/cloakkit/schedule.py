"""Noise schedules for the forward diffusion process.

The forward process is parameterized by cumulative signal coefficients
``alpha_bar[t]`` with

    x_t = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps

indexed t = 0..T, alpha_bar[0] = 1 (clean data), strictly decreasing, and
alpha_bar[T] > 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "make_schedule", "cosine_alpha_bar"]

# Per-step beta endpoints at the reference length of 1000 steps.  For other T
# the betas are rescaled by 1000/T so the terminal signal level alpha_bar[T]
# stays roughly T-independent.
_BETA_START = 1e-4
_BETA_END = 2e-2
_REFERENCE_T = 1000
_BETA_MAX = 0.999

_COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients of the forward process.

    ``alpha_bar`` has length T+1 with alpha_bar[0] = 1; ``betas`` has length T
    with alpha_bar[t] = prod_{s<=t} (1 - betas[s-1]).
    """

    T: int
    alpha_bar: np.ndarray
    betas: np.ndarray
    kind: str = field(default="linear")

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1")
        if ab[-1] <= 0.0:
            raise ValueError("alpha_bar[T] must stay positive")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar[t])."""
        return math.sqrt(self.alpha_bar[self._check_t(t)])

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar[t])."""
        return math.sqrt(1.0 - self.alpha_bar[self._check_t(t)])

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return t


def cosine_alpha_bar(t: float, T: int, s: float = _COSINE_OFFSET) -> float:
    """Squared-cosine cumulative signal curve, normalized so t=0 gives 1."""
    num = math.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    den = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
    return num / den


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule with T steps.

    ``linear`` spaces per-step betas evenly (rescaled by 1000/T so short toy
    schedules still reach near-pure noise) and accumulates products.
    ``cosine`` derives betas from the squared-cosine curve, clipping each at
    0.999 so alpha_bar never hits zero.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        scale = _REFERENCE_T / T
        betas = np.linspace(_BETA_START * scale, _BETA_END * scale, T)
        betas = np.clip(betas, 0.0, _BETA_MAX)
    elif kind == "cosine":
        curve = np.array([cosine_alpha_bar(t, T) for t in range(T + 1)])
        betas = 1.0 - curve[1:] / curve[:-1]
        betas = np.clip(betas, 0.0, _BETA_MAX)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, betas=betas, kind=kind)
