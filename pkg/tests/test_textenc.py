"""Vocabulary, prompt parsing, and the pooled text encoder."""

from __future__ import annotations

import numpy as np
import pytest

from cloakkit.rng import RngState
from cloakkit.textenc import (
    DEFAULT_TEMPLATES,
    ID_TOKEN,
    PromptTemplate,
    TextEncoderStub,
    Vocabulary,
    init_encoder,
)


def test_vocabulary_covers_all_template_words_once() -> None:
    vocab = Vocabulary.from_templates()
    words = {w for tpl in DEFAULT_TEMPLATES for w in tpl.split()}
    assert set(vocab.tokens) == words
    assert len(set(vocab.tokens)) == len(vocab.tokens)
    assert vocab.tokens[vocab.id_token_index] == ID_TOKEN


def test_prompt_parse_maps_words_and_slot() -> None:
    vocab = Vocabulary.from_templates()
    prompt = PromptTemplate.parse(DEFAULT_TEMPLATES[0], vocab)
    words = DEFAULT_TEMPLATES[0].split()
    assert len(prompt.token_ids) == len(words)
    assert prompt.token_ids[prompt.slot_index] == vocab.id_token_index
    assert [vocab.tokens[i] for i in prompt.token_ids] == words


def test_prompt_parse_rejects_bad_slots_and_words() -> None:
    vocab = Vocabulary.from_templates()
    with pytest.raises(ValueError, match="exactly one"):
        PromptTemplate.parse("a photo of person", vocab)
    with pytest.raises(ValueError, match="exactly one"):
        PromptTemplate.parse(f"{ID_TOKEN} and {ID_TOKEN}", vocab)
    with pytest.raises(ValueError, match="not in vocabulary"):
        PromptTemplate.parse(f"a sketch of {ID_TOKEN}", vocab)


def test_encode_is_scaled_sum_of_rows() -> None:
    table = np.arange(12.0).reshape(4, 3)
    enc = TextEncoderStub(table)
    prompt = PromptTemplate(token_ids=(0, 2, 2), slot_index=0)
    expected = (table[0] + table[2] + table[2]) / np.sqrt(3.0)
    np.testing.assert_allclose(enc.encode(prompt), expected, rtol=0, atol=0)


def test_pooled_variance_is_prompt_length_independent() -> None:
    # iid unit-Gaussian rows must pool to unit-variance entries for any
    # prompt length; check the empirical variance over many draws
    rng = RngState(0)
    dim = 4
    for length in (2, 5, 9):
        pooled = []
        for k in range(400):
            enc = TextEncoderStub(rng.derive(length, k).normal((length, dim)))
            prompt = PromptTemplate(token_ids=tuple(range(length)), slot_index=0)
            pooled.append(enc.encode(prompt))
        var = np.var(np.stack(pooled))
        assert var == pytest.approx(1.0, rel=0.15)


def test_grad_rows_matches_finite_differences() -> None:
    rng = RngState(1)
    enc = TextEncoderStub(rng.normal((5, 4)))
    prompt = PromptTemplate(token_ids=(1, 3, 3, 0), slot_index=0)
    g_c = rng.normal(4)

    def objective(table_flat: np.ndarray) -> float:
        probe = TextEncoderStub(table_flat.reshape(5, 4))
        return float(probe.encode(prompt) @ g_c)

    analytic = enc.grad_rows(prompt, g_c).reshape(-1)
    flat = enc.table.reshape(-1).copy()
    h = 1e-6
    for idx in range(flat.size):
        e = np.zeros_like(flat)
        e[idx] = h
        numeric = (objective(flat + e) - objective(flat - e)) / (2 * h)
        assert analytic[idx] == pytest.approx(numeric, abs=1e-8)


def test_encode_rejects_out_of_table_ids() -> None:
    enc = TextEncoderStub(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="outside the embedding table"):
        enc.encode(PromptTemplate(token_ids=(0, 5), slot_index=0))


def test_copy_is_independent_and_hash_tracks_content() -> None:
    enc = init_encoder(Vocabulary.from_templates(), 6, RngState(2))
    dup = enc.copy()
    h0 = enc.params_hash()
    dup.table += 1.0
    assert enc.params_hash() == h0
    assert dup.params_hash() != h0
