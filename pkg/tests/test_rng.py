"""Deterministic rng streams and child derivation."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloakkit.rng import RngState


def test_same_seed_reproduces_draws_bitwise() -> None:
    a = RngState(42).normal(100)
    b = RngState(42).normal(100)
    np.testing.assert_array_equal(a, b)


def test_derived_streams_do_not_depend_on_parent_consumption() -> None:
    parent_a = RngState(7)
    parent_b = RngState(7)
    parent_b.normal(1000)  # consume heavily before deriving
    np.testing.assert_array_equal(
        parent_a.derive("child").normal(16), parent_b.derive("child").normal(16)
    )


def test_distinct_paths_give_distinct_streams() -> None:
    root = RngState(3)
    draws = {
        name: tuple(root.derive(name).normal(8).tolist())
        for name in ("a", "b", "c", "a/b")
    }
    assert len(set(draws.values())) == len(draws)
    assert tuple(root.derive(0).normal(8)) != tuple(root.derive(1).normal(8))


def test_string_and_int_keys_occupy_separate_spaces() -> None:
    root = RngState(9)
    assert not np.array_equal(root.derive("5").normal(4), root.derive(5).normal(4))


def test_nested_derivation_equals_flat_derivation() -> None:
    root = RngState(11)
    np.testing.assert_array_equal(
        root.derive("x").derive("y").normal(6), root.derive("x", "y").normal(6)
    )


def test_negative_keys_are_rejected() -> None:
    with pytest.raises(ValueError):
        RngState(0).derive(-1)


def test_randint_is_inclusive_and_scalar_by_default() -> None:
    stream = RngState(5)
    draws = [stream.randint(2, 4) for _ in range(200)]
    assert all(isinstance(d, int) for d in draws)
    assert set(draws) == {2, 3, 4}
    arr = RngState(5).derive("arr").randint(0, 1, 50)
    assert arr.shape == (50,)
    assert set(arr.tolist()) <= {0, 1}


def test_choice_and_permutation_cover_their_ranges() -> None:
    stream = RngState(6)
    assert {stream.choice(3) for _ in range(100)} == {0, 1, 2}
    perm = stream.permutation(10)
    assert sorted(perm.tolist()) == list(range(10))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_uniform_respects_bounds(seed: int) -> None:
    draws = RngState(seed).uniform(-2.0, 3.5, 64)
    assert np.all(draws >= -2.0) and np.all(draws < 3.5)


def test_frozen_stream_regression_pin() -> None:
    # guards against silent changes to the seeding scheme; these exact
    # values were recorded from this module and must never drift, or every
    # persisted experiment would stop being reproducible
    draws = RngState(2024).derive("pin").normal(3)
    pinned = np.array(
        [-1.0171077624780154, 0.9643032872110197, 0.08938618322769644]
    )
    np.testing.assert_allclose(draws, pinned, rtol=0, atol=0)
