"""Shared fixtures: tiny schedules, models and worlds sized for fast tests.

Unit tests run on deliberately small components (short schedules, narrow
networks) so the whole suite stays quick; the acceptance tests build the
full default-config world once per session and reuse it.
"""

from __future__ import annotations

import numpy as np
import pytest

from cloakkit.model import DenoiserArch, DenoiserModel, init_denoiser
from cloakkit.rng import RngState
from cloakkit.schedule import NoiseSchedule, make_schedule


def make_small_arch(
    input_dim: int = 12,
    cond_dim: int = 5,
    feat_dim: int = 8,
    widths: tuple[int, ...] = (14, 10),
) -> DenoiserArch:
    return DenoiserArch(
        input_dim=input_dim,
        cond_dim=cond_dim,
        time_dim=6,
        widths=widths,
        feat_dim=feat_dim,
        feat_scale=4.0,
        feat_seed=7,
    )


def make_small_model(seed: int = 0, **arch_kwargs) -> DenoiserModel:
    arch = make_small_arch(**arch_kwargs)
    return init_denoiser(arch, RngState(seed).derive("init"))


@pytest.fixture(scope="session")
def sched20() -> NoiseSchedule:
    return make_schedule(20)


@pytest.fixture()
def small_model() -> DenoiserModel:
    return make_small_model(0)


@pytest.fixture()
def rng() -> RngState:
    return RngState(1234)


def central_diff(f, x: np.ndarray, idx: int, h: float) -> float:
    """Central finite difference of a scalar function along one coordinate."""

    e = np.zeros_like(x)
    e[idx] = h
    return (f(x + e) - f(x - e)) / (2.0 * h)


def rel_err(analytic: float, numeric: float) -> float:
    """Relative error with an absolute floor for near-zero gradients."""

    return abs(analytic - numeric) / max(abs(numeric), 1e-8)
