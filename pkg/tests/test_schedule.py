"""Noise-schedule construction and invariants."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloakkit.schedule import NoiseSchedule, cosine_alpha_bar, make_schedule


def test_linear_schedule_matches_direct_recursion() -> None:
    # independent recomputation: beta_i from the documented endpoints with
    # the 0.999 cap, then an explicit running product instead of np.cumprod
    for T in (10, 100):
        sched = make_schedule(T, "linear")
        scale = 1000.0 / T
        betas = [
            min(1e-4 * scale + (2e-2 - 1e-4) * scale * i / (T - 1), 0.999)
            for i in range(T)
        ]
        prod = 1.0
        for t in range(1, T + 1):
            prod *= 1.0 - betas[t - 1]
            assert sched.alpha_bar[t] == pytest.approx(prod, rel=1e-12)
            assert sched.betas[t - 1] == pytest.approx(betas[t - 1], rel=1e-12)
        assert sched.alpha_bar[0] == 1.0


def test_cosine_schedule_follows_curve_ratios() -> None:
    T = 16
    sched = make_schedule(T, "cosine")
    for t in range(1, T + 1):
        expected = min(1.0 - cosine_alpha_bar(t, T) / cosine_alpha_bar(t - 1, T), 0.999)
        assert sched.betas[t - 1] == pytest.approx(expected, rel=1e-12)


def test_beta_rescaling_drives_short_schedules_to_pure_noise() -> None:
    # without the 1000/T rescale a 50-step linear schedule would retain
    # most of its signal; with it the terminal level is near zero
    unscaled_prod = 1.0
    for i in range(50):
        unscaled_prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / 49)
    assert unscaled_prod > 0.5
    for T in (50, 100, 250, 1000):
        assert make_schedule(T, "linear").alpha_bar[-1] < 1e-4


def test_signal_noise_identity() -> None:
    sched = make_schedule(30)
    for t in (0, 1, 15, 30):
        assert sched.signal(t) ** 2 + sched.noise(t) ** 2 == pytest.approx(1.0, abs=1e-12)
    assert sched.signal(0) == 1.0
    assert sched.noise(0) == 0.0


@settings(max_examples=30, deadline=None)
@given(
    T=st.integers(min_value=1, max_value=400),
    kind=st.sampled_from(["linear", "cosine"]),
)
def test_schedule_invariants_hold_for_any_length(T: int, kind: str) -> None:
    sched = make_schedule(T, kind)
    ab = sched.alpha_bar
    assert ab.shape == (T + 1,)
    assert ab[0] == 1.0
    assert np.all(ab > 0.0)
    assert np.all(np.diff(ab) < 0.0)
    assert sched.betas.shape == (T,)
    assert np.all((sched.betas >= 0.0) & (sched.betas <= 0.999))


def test_timestep_bounds_are_checked() -> None:
    sched = make_schedule(5)
    with pytest.raises(ValueError):
        sched.signal(-1)
    with pytest.raises(ValueError):
        sched.noise(6)


def test_bad_construction_is_rejected() -> None:
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    good = make_schedule(4)
    with pytest.raises(ValueError):
        NoiseSchedule(T=4, alpha_bar=good.alpha_bar[:-1], betas=good.betas)
    increasing = np.array([1.0, 0.5, 0.6, 0.4, 0.3])
    with pytest.raises(ValueError):
        NoiseSchedule(T=4, alpha_bar=increasing, betas=good.betas)


def test_cosine_curve_normalization() -> None:
    assert cosine_alpha_bar(0.0, 100) == pytest.approx(1.0, abs=1e-15)
    assert 0.0 < cosine_alpha_bar(100.0, 100) < 1e-3
    # the squared cosine passes very near 1/2 at the midpoint
    assert math.isclose(cosine_alpha_bar(50.0, 100), 0.5, rel_tol=0.05)
