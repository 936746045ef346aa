"""Synthetic identity rendering and dataset import/export."""

from __future__ import annotations

import numpy as np
import pytest

from cloakkit.data import (
    DEFAULT_IMAGE_SHAPE,
    PIXEL_RANGE,
    IdentityDataset,
    draw_context_params,
    draw_identity_params,
    import_dataset,
    render_image,
    save_dataset,
    stack_corpus,
    synth_dataset,
)
from cloakkit.errors import DataError
from cloakkit.rng import RngState


def test_identity_params_obey_documented_ranges() -> None:
    for seed in range(30):
        p = draw_identity_params(RngState(seed))
        assert 0.5 <= p.wave_fx <= 3.0 and 0.5 <= p.wave_fy <= 3.0
        assert 0.0 <= p.stripe_angle <= np.pi
        assert 1.0 <= p.stripe_freq <= 4.0
        assert 0.25 <= p.blob_cx <= 0.75 and 0.25 <= p.blob_cy <= 0.75
        assert 0.12 <= p.blob_r <= 0.3
        assert p.blob_sign in (-1.0, 1.0)
        # component weights are rescaled to a fixed total
        assert p.w_wave + p.w_stripe + p.w_blob == pytest.approx(1.6, rel=1e-12)


def test_rendering_is_deterministic_and_in_range() -> None:
    identity = draw_identity_params(RngState(0))
    context = draw_context_params(RngState(1), 1.0)
    a = render_image(identity, context)
    b = render_image(identity, context)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (DEFAULT_IMAGE_SHAPE[0] * DEFAULT_IMAGE_SHAPE[1],)
    assert np.all(a >= PIXEL_RANGE[0]) and np.all(a <= PIXEL_RANGE[1])


def test_zero_spread_freezes_context() -> None:
    identity = draw_identity_params(RngState(2))
    c0 = draw_context_params(RngState(3), 0.0)
    assert (c0.dx, c0.dy, c0.rot, c0.bias) == (0.0, 0.0, 0.0, 0.0)
    assert c0.gain == 1.0
    with pytest.raises(ValueError):
        draw_context_params(RngState(3), -0.5)


def test_same_identity_images_are_closer_than_cross_identity() -> None:
    ds_a = synth_dataset(100, n_train=6, n_test=6)
    ds_b = synth_dataset(200, n_train=6, n_test=6)
    within = np.mean(
        [np.linalg.norm(x - y) for x in ds_a.train for y in ds_a.test]
    )
    across = np.mean(
        [np.linalg.norm(x - y) for x in ds_a.train for y in ds_b.test]
    )
    assert within < across


def test_synth_dataset_extends_without_changing_earlier_images() -> None:
    small = synth_dataset(7, n_train=2, n_test=2)
    large = synth_dataset(7, n_train=2, n_test=6)
    np.testing.assert_array_equal(small.train, large.train)
    np.testing.assert_array_equal(small.test, large.test[:2])


def test_dataset_validation_rejects_bad_shapes_and_values() -> None:
    good = synth_dataset(1)
    with pytest.raises(DataError, match="dim"):
        IdentityDataset("x", good.train[:, :10], good.test, good.image_shape)
    bad = good.train.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        IdentityDataset("x", bad, good.test, good.image_shape)


def test_stack_corpus_labels_follow_dataset_order() -> None:
    sets = [synth_dataset(s, n_train=2, n_test=3) for s in (10, 20)]
    images, labels = stack_corpus(sets)
    assert images.shape == (10, sets[0].dim)
    assert labels.tolist() == [0] * 5 + [1] * 5
    mismatched = synth_dataset(30, image_shape=(8, 8))
    with pytest.raises(DataError, match="share one image shape"):
        stack_corpus([sets[0], mismatched])


def test_save_then_import_round_trips_exactly(tmp_path) -> None:
    ds = synth_dataset(42, n_train=3, n_test=2)
    manifest = save_dataset(tmp_path / "person", ds)
    back = import_dataset(manifest)
    np.testing.assert_array_equal(back.train, ds.train)
    np.testing.assert_array_equal(back.test, ds.test)
    assert back.identity_id == ds.identity_id
    assert back.image_shape == ds.image_shape


def test_import_rejects_malformed_manifests(tmp_path) -> None:
    ds = synth_dataset(5, n_train=2, n_test=2)
    manifest = save_dataset(tmp_path / "p", ds)
    base = manifest.read_text(encoding="utf-8")

    with pytest.raises(DataError, match="no such manifest"):
        import_dataset(tmp_path / "missing" / "manifest.txt")

    no_test = tmp_path / "no_test"
    no_test.mkdir()
    (no_test / "manifest.txt").write_text(
        "\n".join(l for l in base.splitlines() if not l.startswith("test=")) + "\n",
        encoding="utf-8",
    )
    for f in (tmp_path / "p").glob("*.tns"):
        (no_test / f.name).write_bytes(f.read_bytes())
    with pytest.raises(DataError, match="at least one train and one test"):
        import_dataset(no_test / "manifest.txt")

    manifest.write_text(base + "unknownkey=1\n", encoding="utf-8")
    with pytest.raises(DataError, match="unknown key"):
        import_dataset(manifest)

    manifest.write_text(base + "not a pair\n", encoding="utf-8")
    with pytest.raises(DataError, match="key=value"):
        import_dataset(manifest)

    manifest.write_text(base + "test=train_000.tns\n", encoding="utf-8")
    with pytest.raises(DataError, match="both splits"):
        import_dataset(manifest)


def test_import_checks_tensor_shapes_agree(tmp_path) -> None:
    from cloakkit import tns

    d = tmp_path / "mixed"
    d.mkdir()
    tns.write_tensor(d / "a.tns", np.zeros((4, 4)))
    tns.write_tensor(d / "b.tns", np.zeros((5, 5)))
    (d / "manifest.txt").write_text(
        "train=a.tns\ntest=b.tns\n", encoding="utf-8"
    )
    with pytest.raises(DataError, match="differs from first image"):
        import_dataset(d / "manifest.txt")


def test_import_rank1_requires_image_shape(tmp_path) -> None:
    from cloakkit import tns

    d = tmp_path / "flat"
    d.mkdir()
    tns.write_tensor(d / "a.tns", np.zeros(9))
    tns.write_tensor(d / "b.tns", np.ones(9))
    (d / "manifest.txt").write_text("train=a.tns\ntest=b.tns\n", encoding="utf-8")
    with pytest.raises(DataError, match="image_shape"):
        import_dataset(d / "manifest.txt")
    (d / "manifest.txt").write_text(
        "image_shape=3x3\ntrain=a.tns\ntest=b.tns\n", encoding="utf-8"
    )
    back = import_dataset(d / "manifest.txt")
    assert back.image_shape == (3, 3)


def test_import_rejects_contradictory_image_shape(tmp_path) -> None:
    from cloakkit import tns

    d = tmp_path / "contra"
    d.mkdir()
    tns.write_tensor(d / "a.tns", np.zeros((4, 4)))
    tns.write_tensor(d / "b.tns", np.ones((4, 4)))
    (d / "manifest.txt").write_text(
        "image_shape=3x3\ntrain=a.tns\ntest=b.tns\n", encoding="utf-8"
    )
    with pytest.raises(DataError, match="contradicts"):
        import_dataset(d / "manifest.txt")
