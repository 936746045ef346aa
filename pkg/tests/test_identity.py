"""Identity binding, anchor diversification, and subspace estimation."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloakkit.diffusion import denoise_loss_at
from cloakkit.identity import (
    AnchorSet,
    IdentitySubspace,
    core_identity,
    diversify_contexts,
    estimate_subspace,
    learn_identity,
    sample_condition,
)
from cloakkit.rng import RngState
from cloakkit.textenc import DEFAULT_TEMPLATES, PromptTemplate, Vocabulary, init_encoder

from conftest import make_small_model


def _encoder_and_prompt(dim: int, seed: int = 0):
    vocab = Vocabulary.from_templates()
    enc = init_encoder(vocab, dim, RngState(seed))
    return enc, PromptTemplate.parse(DEFAULT_TEMPLATES[0], vocab)


def test_learn_identity_descends_and_moves_both_surfaces(sched20) -> None:
    model = make_small_model(1)
    enc, prompt = _encoder_and_prompt(model.arch.cond_dim)
    images = [RngState(50).derive(i).normal(model.arch.input_dim) for i in range(3)]
    tuned_model, tuned_enc = learn_identity(
        images, model, enc, prompt, 400, 5e-3, RngState(7), sched20
    )
    early = float(np.mean(tuned_model.loss_curve[:40]))
    late = float(np.mean(tuned_model.loss_curve[-40:]))
    assert late < 0.8 * early
    # joint training must touch theta and the prompt's embedding rows only
    assert not np.array_equal(tuned_model.params, model.params)
    used = set(prompt.token_ids)
    for row in range(enc.table.shape[0]):
        changed = not np.array_equal(tuned_enc.table[row], enc.table[row])
        assert changed == (row in used)


def test_learn_identity_zero_steps_returns_copies(sched20) -> None:
    model = make_small_model(1)
    enc, prompt = _encoder_and_prompt(model.arch.cond_dim)
    m2, e2 = learn_identity([], model, enc, prompt, 0, 1e-3, RngState(0), sched20)
    assert m2 is not model and e2 is not enc
    np.testing.assert_array_equal(m2.params, model.params)
    np.testing.assert_array_equal(e2.table, enc.table)
    with pytest.raises(ValueError):
        learn_identity([], model, enc, prompt, 5, 1e-3, RngState(0), sched20)


def test_core_identity_is_the_pooled_prompt_embedding() -> None:
    enc, prompt = _encoder_and_prompt(6)
    np.testing.assert_array_equal(core_identity(enc, prompt), enc.encode(prompt))


def test_zero_step_anchors_equal_core_identity_exactly(sched20) -> None:
    model = make_small_model(2)
    c_id = RngState(3).normal(model.arch.cond_dim)
    images = [RngState(60).derive(i).normal(model.arch.input_dim) for i in range(4)]
    anchors = diversify_contexts(images, model, c_id, 0, 1e-3, RngState(4), sched20)
    assert anchors.anchors.shape == (4, model.arch.cond_dim)
    assert anchors.image_ids == (0, 1, 2, 3)
    for j in range(4):
        np.testing.assert_array_equal(anchors.anchors[j], c_id)


def test_anchor_streams_are_order_independent(sched20) -> None:
    # anchor j depends only on rng.derive(j), so dropping an image must not
    # change the anchors of the images that remain before it
    model = make_small_model(2)
    c_id = RngState(3).normal(model.arch.cond_dim)
    images = [RngState(61).derive(i).normal(model.arch.input_dim) for i in range(3)]
    full = diversify_contexts(images, model, c_id, 5, 1e-2, RngState(9), sched20)
    fewer = diversify_contexts(images[:2], model, c_id, 5, 1e-2, RngState(9), sched20)
    np.testing.assert_array_equal(full.anchors[:2], fewer.anchors)


def test_anchor_update_replays_by_hand(sched20) -> None:
    # one image, one step, batch_size 2: anchor moves by the averaged gradient
    model = make_small_model(2)
    c_id = RngState(3).normal(model.arch.cond_dim)
    x0 = RngState(62).normal(model.arch.input_dim)
    lr = 1e-2
    got = diversify_contexts([x0], model, c_id, 1, lr, RngState(11), sched20, batch_size=2)
    stream = RngState(11).derive(0)
    g = np.zeros_like(c_id)
    for _ in range(2):
        t = stream.randint(1, sched20.T)
        eps = stream.normal(x0.shape)
        _, grads = denoise_loss_at(model, x0, c_id, t, eps, sched20, wrt=("c",))
        g += grads["c"]
    np.testing.assert_array_equal(got.anchors[0], c_id - lr * (g / 2))


def test_subspace_matches_brute_force_statistics(rng) -> None:
    pts = rng.normal((9, 5))
    sub = estimate_subspace(AnchorSet(anchors=pts, image_ids=tuple(range(9))))
    mu = pts.sum(axis=0) / 9
    var = ((pts - mu) ** 2).sum(axis=0) / 8
    assert np.max(np.abs(sub.mu - mu)) < 1e-12
    assert np.max(np.abs(sub.sigma - np.sqrt(var))) < 1e-12
    assert sub.n_anchors == 9 and sub.ddof == 1


def test_subspace_single_anchor_degenerates_to_point(rng) -> None:
    c = rng.normal(4)
    sub = estimate_subspace(AnchorSet(anchors=c[None, :], image_ids=(0,)))
    np.testing.assert_array_equal(sub.mu, c)
    np.testing.assert_array_equal(sub.sigma, np.zeros(4))
    point = IdentitySubspace.point(c)
    np.testing.assert_array_equal(point.mu, c)
    np.testing.assert_array_equal(point.sigma, np.zeros(4))
    assert point.n_anchors == 1


def test_point_subspace_hash_tracks_content(rng) -> None:
    c = rng.normal(4)
    a, b = IdentitySubspace.point(c), IdentitySubspace.point(c)
    assert a.content_hash() == b.content_hash()
    c2 = c.copy()
    c2[0] += 1e-9
    assert IdentitySubspace.point(c2).content_hash() != a.content_hash()


def test_subspace_validation() -> None:
    with pytest.raises(ValueError):
        IdentitySubspace(mu=np.zeros(3), sigma=np.zeros(2))
    with pytest.raises(ValueError):
        IdentitySubspace(mu=np.zeros(3), sigma=np.array([0.1, -0.1, 0.0]))
    with pytest.raises(ValueError):
        AnchorSet(anchors=np.zeros((2, 3)), image_ids=(0,))
    with pytest.raises(ValueError):
        estimate_subspace(AnchorSet(anchors=np.zeros((0, 3)), image_ids=()))


def test_sampling_from_a_point_returns_the_point_exactly(rng) -> None:
    sub = IdentitySubspace.point(rng.normal(6))
    for seed in range(5):
        np.testing.assert_array_equal(sample_condition(sub, RngState(seed)), sub.mu)


@given(truncation=st.floats(min_value=0.5, max_value=4.0), seed=st.integers(0, 500))
@settings(max_examples=40, deadline=None)
def test_sampled_conditions_respect_truncation(truncation: float, seed: int) -> None:
    sub = IdentitySubspace(mu=np.zeros(8), sigma=np.full(8, 2.0), n_anchors=3)
    c = sample_condition(sub, RngState(seed), truncation=truncation)
    assert np.all(np.abs(c) <= 2.0 * truncation + 1e-12)


def test_sample_condition_moments_match_monte_carlo(rng) -> None:
    # with generous truncation the empirical mean/std approach (mu, sigma)
    mu, sigma = rng.normal(3), np.abs(rng.normal(3)) + 0.5
    sub = IdentitySubspace(mu=mu, sigma=sigma, n_anchors=10)
    draws = np.stack([sample_condition(sub, RngState(10_000 + i), 8.0) for i in range(4000)])
    se = sigma / np.sqrt(4000)
    assert np.all(np.abs(draws.mean(axis=0) - mu) < 4 * se)
    assert np.all(np.abs(draws.std(axis=0, ddof=1) - sigma) < 0.1 * sigma)


def test_sample_condition_rejects_bad_truncation(rng) -> None:
    sub = IdentitySubspace.point(rng.normal(3))
    with pytest.raises(ValueError):
        sample_condition(sub, RngState(0), truncation=0.0)
