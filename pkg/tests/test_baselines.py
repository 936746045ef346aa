"""Image-anchored baseline cloaks and their reduction relationships."""

from __future__ import annotations

import numpy as np
import pytest

from cloakkit.baselines import (
    BaselineConfig,
    gradient_avg_cloak,
    image_specific_cloaks,
    transfer_assignment,
)
from cloakkit.cloak import pgd_step
from cloakkit.diffusion import denoise_loss_at
from cloakkit.rng import RngState

from conftest import make_small_model


def _images(n: int, dim: int, seed: int = 30) -> list[np.ndarray]:
    return [RngState(seed).derive(i).normal(dim) * 0.4 + 0.5 for i in range(n)]


def test_single_image_average_equals_image_specific_bitwise(sched20) -> None:
    # with one image the averaged gradient IS that image's gradient and both
    # loops consume the same derived stream, so trajectories coincide exactly
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(1, model.arch.input_dim)
    cfg = BaselineConfig(steps=25)
    solo = image_specific_cloaks(model, imgs, c, cfg, sched20, RngState(77))[0]
    avg = gradient_avg_cloak(model, imgs, c, cfg, sched20, RngState(77))
    np.testing.assert_array_equal(avg.delta, solo.delta)
    assert avg.norm_history == solo.norm_history


def test_image_specific_replays_by_hand(sched20) -> None:
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(2, model.arch.input_dim)
    cfg = BaselineConfig(steps=4, alpha=0.03)
    got = image_specific_cloaks(model, imgs, c, cfg, sched20, RngState(5))

    for i, image in enumerate(imgs):
        stream = RngState(5).derive(i)
        delta = np.zeros_like(image)
        for _ in range(cfg.steps):
            t = stream.randint(1, sched20.T)
            eps = stream.normal(image.shape)
            _, grads = denoise_loss_at(model, image + delta, c, t, eps, sched20, wrt=("x",))
            delta = pgd_step(delta, sched20.signal(t) * grads["x"], cfg.alpha, cfg.eta)
        np.testing.assert_array_equal(got[i].delta, delta)


def test_gradient_average_replays_by_hand(sched20) -> None:
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(3, model.arch.input_dim)
    cfg = BaselineConfig(steps=3, alpha=0.03)
    got = gradient_avg_cloak(model, imgs, c, cfg, sched20, RngState(8))

    streams = [RngState(8).derive(i) for i in range(3)]
    delta = np.zeros_like(imgs[0])
    for _ in range(cfg.steps):
        g_sum = np.zeros_like(delta)
        for image, stream in zip(imgs, streams):
            t = stream.randint(1, sched20.T)
            eps = stream.normal(image.shape)
            _, grads = denoise_loss_at(model, image + delta, c, t, eps, sched20, wrt=("x",))
            g_sum += sched20.signal(t) * grads["x"]
        delta = pgd_step(delta, g_sum / 3, cfg.alpha, cfg.eta)
    np.testing.assert_array_equal(got.delta, delta)


def test_budget_holds_at_every_recorded_step(sched20) -> None:
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(2, model.arch.input_dim)
    cfg = BaselineConfig(steps=30)
    for cloak in image_specific_cloaks(model, imgs, c, cfg, sched20, RngState(4)):
        assert len(cloak.norm_history) == cfg.steps
        assert all(h <= cfg.eta + 1e-12 for h in cloak.norm_history)
    avg = gradient_avg_cloak(model, imgs, c, cfg, sched20, RngState(4))
    assert all(h <= cfg.eta + 1e-12 for h in avg.norm_history)


def test_per_image_streams_are_independent(sched20) -> None:
    # removing the last image must not change the cloaks of the others
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(3, model.arch.input_dim)
    cfg = BaselineConfig(steps=5)
    full = image_specific_cloaks(model, imgs, c, cfg, sched20, RngState(6))
    fewer = image_specific_cloaks(model, imgs[:2], c, cfg, sched20, RngState(6))
    for a, b in zip(fewer, full[:2]):
        np.testing.assert_array_equal(a.delta, b.delta)


def test_zero_steps_yield_zero_cloaks(sched20) -> None:
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    imgs = _images(2, model.arch.input_dim)
    cfg = BaselineConfig(steps=0)
    for cloak in image_specific_cloaks(model, imgs, c, cfg, sched20, RngState(1)):
        assert cloak.inf_norm() == 0.0
    assert gradient_avg_cloak(model, imgs, c, cfg, sched20, RngState(1)).inf_norm() == 0.0


def test_input_validation(sched20) -> None:
    model = make_small_model(12)
    c = RngState(2).normal(model.arch.cond_dim)
    with pytest.raises(ValueError):
        image_specific_cloaks(model, [], c, BaselineConfig(), sched20, RngState(0))
    with pytest.raises(ValueError):
        gradient_avg_cloak(model, [], c, BaselineConfig(), sched20, RngState(0))
    bad = [np.zeros(3), np.zeros(4)]
    with pytest.raises(ValueError):
        gradient_avg_cloak(model, bad, c, BaselineConfig(), sched20, RngState(0))
    with pytest.raises(ValueError):
        BaselineConfig(eta=-1.0)


def test_transfer_assignment_is_deterministic_and_in_range() -> None:
    got = transfer_assignment(10, 4, RngState(3))
    again = transfer_assignment(10, 4, RngState(3))
    assert got == again
    assert len(got) == 10
    assert all(0 <= k < 4 for k in got)
    assert transfer_assignment(0, 4, RngState(3)) == []
    with pytest.raises(ValueError):
        transfer_assignment(5, 0, RngState(3))
    with pytest.raises(ValueError):
        transfer_assignment(-1, 2, RngState(3))
