"""Forward/reverse diffusion algebra, sampling, and denoiser training."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloakkit.diffusion import (
    ddim_step,
    ddim_timegrid,
    denoise_loss,
    denoise_loss_at,
    forward_diffuse,
    predict_x0,
    sample_latent,
    sample_latent_batch,
    train_denoiser,
)
from cloakkit.rng import RngState
from cloakkit.schedule import make_schedule

from conftest import central_diff, make_small_model


def test_forward_then_invert_recovers_x0(sched20, rng) -> None:
    x0 = rng.normal(12)
    for t in range(1, sched20.T + 1):
        eps = rng.normal(12)
        x_t = forward_diffuse(x0, t, eps, sched20)
        back = predict_x0(x_t, t, eps, sched20)
        assert np.max(np.abs(back - x0)) < 1e-10


def test_forward_diffuse_matches_closed_form(sched20, rng) -> None:
    x0, eps, t = rng.normal(7), rng.normal(7), 9
    ab = sched20.alpha_bar[t]
    expected = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    np.testing.assert_array_equal(forward_diffuse(x0, t, eps, sched20), expected)


def test_predict_x0_rejects_t_zero(sched20, rng) -> None:
    x = rng.normal(4)
    with pytest.raises(ValueError):
        predict_x0(x, 0, x, sched20)
    with pytest.raises(ValueError):
        predict_x0(x, sched20.T + 1, x, sched20)


def test_ddim_step_matches_closed_form(sched20, rng) -> None:
    # independent recomputation straight from the alpha_bar table
    x_t, eps, extra = rng.normal(6), rng.normal(6), rng.normal(6)
    t, t_prev, sigma = 15, 9, 0.1
    ab_t, ab_prev = sched20.alpha_bar[t], sched20.alpha_bar[t_prev]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    expected = (
        math.sqrt(ab_prev) * x0_hat
        + math.sqrt(1.0 - ab_prev - sigma**2) * eps
        + sigma * extra
    )
    got = ddim_step(x_t, t, t_prev, eps, sigma, extra, sched20)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_ddim_step_with_true_noise_walks_the_forward_curve(sched20, rng) -> None:
    # when eps_pred equals the actual corruption noise, a deterministic step
    # lands exactly on the forward process at the earlier timestep
    x0, eps = rng.normal(5), rng.normal(5)
    x_t = forward_diffuse(x0, 17, eps, sched20)
    stepped = ddim_step(x_t, 17, 6, eps, 0.0, None, sched20)
    expected = forward_diffuse(x0, 6, eps, sched20)
    assert np.max(np.abs(stepped - expected)) < 1e-12
    # t_prev = 0 recovers the clean image itself
    final = ddim_step(x_t, 17, 0, eps, 0.0, None, sched20)
    assert np.max(np.abs(final - x0)) < 1e-12


def test_ddim_step_argument_validation(sched20, rng) -> None:
    x = rng.normal(3)
    with pytest.raises(ValueError):
        ddim_step(x, 5, 5, x, 0.0, None, sched20)  # t_prev not below t
    with pytest.raises(ValueError):
        ddim_step(x, 5, 2, x, -0.5, None, sched20)  # negative sigma
    with pytest.raises(ValueError):
        ddim_step(x, 5, 2, x, 0.3, None, sched20)  # stochastic but no draw
    with pytest.raises(ValueError):
        ddim_step(x, 5, 2, x, 10.0, x, sched20)  # sigma exceeds noise level


def test_ddim_step_x0_clip_bounds_the_clean_estimate(sched20, rng) -> None:
    # the clip applies to x0_hat only; the raw noise prediction still drives
    # the direction term
    x_t, eps = rng.normal(6) * 10.0, rng.normal(6)
    t, t_prev = 15, 9
    ab_t, ab_prev = sched20.alpha_bar[t], sched20.alpha_bar[t_prev]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    clipped = np.clip(x0_hat, 0.0, 1.0)
    expected = math.sqrt(ab_prev) * clipped + math.sqrt(1.0 - ab_prev) * eps
    got = ddim_step(x_t, t, t_prev, eps, 0.0, None, sched20, x0_clip=(0.0, 1.0))
    assert np.max(np.abs(got - expected)) < 1e-12
    # a box wide enough to never bind reproduces the plain step exactly
    plain = ddim_step(x_t, t, t_prev, eps, 0.0, None, sched20)
    wide = ddim_step(x_t, t, t_prev, eps, 0.0, None, sched20, x0_clip=(-1e9, 1e9))
    np.testing.assert_array_equal(wide, plain)
    with pytest.raises(ValueError):
        ddim_step(x_t, t, t_prev, eps, 0.0, None, sched20, x0_clip=(1.0, 0.0))


def test_sampler_x0_clip_keeps_full_chains_in_the_data_box(sched20) -> None:
    # alpha_bar[0] = 1, so the last step of a clipped full chain returns the
    # clipped clean estimate itself; even a wild model cannot escape the box
    model = make_small_model(21)
    model.params *= 40.0
    c = RngState(6).normal(model.arch.cond_dim)
    raw = sample_latent_batch(model, c, 0, 10, RngState(5), sched20, n=4)
    boxed = sample_latent_batch(
        model, c, 0, 10, RngState(5), sched20, n=4, x0_clip=(0.0, 1.0)
    )
    assert np.max(np.abs(raw)) > 10.0
    assert np.all(boxed >= 0.0) and np.all(boxed <= 1.0)


@given(
    T=st.integers(min_value=2, max_value=300),
    data=st.data(),
)
@settings(max_examples=60, deadline=None)
def test_timegrid_invariants(T: int, data) -> None:
    t_stop = data.draw(st.integers(min_value=0, max_value=T))
    steps = data.draw(st.integers(min_value=1, max_value=T))
    grid = ddim_timegrid(T, t_stop, steps)
    assert grid[0] == T
    assert grid[-1] == t_stop
    assert np.all(np.diff(grid) < 0)
    assert len(grid) <= steps + 1


def test_timegrid_degenerate_gap() -> None:
    np.testing.assert_array_equal(ddim_timegrid(50, 50, 10), [50])
    np.testing.assert_array_equal(ddim_timegrid(4, 0, 4), [4, 3, 2, 1, 0])


def test_sampler_is_deterministic_given_seed(sched20, small_model) -> None:
    c = RngState(3).normal(small_model.arch.cond_dim)
    a = sample_latent(small_model, c, 0, 10, RngState(77), sched20)
    b = sample_latent(small_model, c, 0, 10, RngState(77), sched20)
    np.testing.assert_array_equal(a, b)


def test_sampler_shape_argument_reshapes(sched20, small_model) -> None:
    c = RngState(3).normal(small_model.arch.cond_dim)
    out = sample_latent_batch(small_model, c, 0, 5, RngState(1), sched20, n=3, shape=(3, 4))
    assert out.shape == (3, 3, 4)
    assert np.all(np.isfinite(out))


def test_sampler_stops_at_requested_timestep(sched20, small_model) -> None:
    # a later stop leaves more injected noise in the latent; exactness is
    # checked by replaying the chain by hand
    c = RngState(3).normal(small_model.arch.cond_dim)
    rng = RngState(9)
    got = sample_latent(small_model, c, 4, 6, rng, sched20)
    grid = ddim_timegrid(sched20.T, 4, 6)
    replay = RngState(9).normal((1, small_model.arch.input_dim))
    for i in range(len(grid) - 1):
        eps_pred = small_model.forward(replay, int(grid[i]), c)
        replay = ddim_step(replay, int(grid[i]), int(grid[i + 1]), eps_pred, 0.0, None, sched20)
    np.testing.assert_array_equal(got, replay[0])


def test_denoise_loss_at_value_and_gradients(sched20) -> None:
    model = make_small_model(11)
    rng = RngState(4)
    d, cd = model.arch.input_dim, model.arch.cond_dim
    x0, c, eps, t = rng.normal(d), rng.normal(cd), rng.normal(d), 8
    loss, grads = denoise_loss_at(model, x0, c, t, eps, sched20, wrt=("theta", "x", "c"))

    x_t = forward_diffuse(x0, t, eps, sched20)
    resid = model.forward(x_t, t, c) - eps
    assert loss == pytest.approx(float(resid @ resid), rel=1e-12)

    def close(analytic: float, numeric: float) -> bool:
        return abs(analytic - numeric) <= 1e-6 * max(1.0, abs(analytic), abs(numeric))

    def loss_at_xt(v: np.ndarray) -> float:
        r = model.forward(v, t, c) - eps
        return float(r @ r)

    def loss_at_c(v: np.ndarray) -> float:
        r = model.forward(x_t, t, v) - eps
        return float(r @ r)

    for idx in range(d):
        assert close(grads["x"][idx], central_diff(loss_at_xt, x_t, idx, 1e-6))
    for idx in range(cd):
        assert close(grads["c"][idx], central_diff(loss_at_c, c, idx, 1e-6))
    from cloakkit.model import DenoiserModel

    def loss_at_theta(v: np.ndarray) -> float:
        r = DenoiserModel(model.arch, v).forward(x_t, t, c) - eps
        return float(r @ r)

    for idx in np.linspace(0, model.params.size - 1, 20, dtype=int):
        assert close(grads["theta"][idx], central_diff(loss_at_theta, model.params, int(idx), 1e-6))


def test_denoise_loss_reproduces_its_draws(sched20) -> None:
    # the convenience wrapper must consume exactly (t, eps) in that order
    model = make_small_model(2)
    rng = RngState(31)
    x0 = RngState(8).normal(model.arch.input_dim)
    c = RngState(9).normal(model.arch.cond_dim)
    loss, g = denoise_loss(model, x0, c, rng, sched20)
    replay = RngState(31)
    t = replay.randint(1, sched20.T)
    eps = replay.normal(x0.shape)
    loss2, grads2 = denoise_loss_at(model, x0, c, t, eps, sched20, wrt=("theta",))
    assert loss == loss2
    np.testing.assert_array_equal(g, grads2["theta"])


def test_train_denoiser_descends_and_preserves_input(sched20) -> None:
    model = make_small_model(5)
    frozen = model.params.copy()
    rng = RngState(20)
    data = [
        (rng.normal(model.arch.input_dim), rng.normal(model.arch.cond_dim))
        for _ in range(6)
    ]
    trained = train_denoiser(data, model, 300, 1e-2, RngState(21), sched20, batch_size=8)
    assert len(trained.loss_curve) == 300
    early = float(np.mean(trained.loss_curve[:30]))
    late = float(np.mean(trained.loss_curve[-30:]))
    assert late < 0.7 * early
    np.testing.assert_array_equal(model.params, frozen)
    assert model.loss_curve == []


def test_train_denoiser_zero_steps_copies(sched20) -> None:
    model = make_small_model(5)
    out = train_denoiser([], model, 0, 1e-2, RngState(0), sched20)
    assert out is not model
    np.testing.assert_array_equal(out.params, model.params)
    with pytest.raises(ValueError):
        train_denoiser([], model, 5, 1e-2, RngState(0), sched20)
