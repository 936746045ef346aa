"""Prompt templates and the trainable text-encoder stub.

Prompts are short token sequences with exactly one slot for the trainable
identity token.  The encoder is a learned embedding table with scaled-sum
pooling: encode(prompt) = sum of the prompt's token rows divided by
sqrt(len).  With independently initialized rows the pooled entries then
have variance 1 regardless of prompt length, keeping prompt embeddings on
the same scale as the unit-Gaussian condition vectors the base model is
trained against.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .rng import RngState

__all__ = [
    "ID_TOKEN",
    "DEFAULT_TEMPLATES",
    "Vocabulary",
    "PromptTemplate",
    "TextEncoderStub",
    "init_encoder",
]

ID_TOKEN = "<id>"

# Training uses the first template; evaluation varies context words around the
# identity slot across all three.
DEFAULT_TEMPLATES = (
    f"a photo of {ID_TOKEN} person",
    f"a studio portrait of {ID_TOKEN} person",
    f"a photo of {ID_TOKEN} person by the window",
)


@dataclass(frozen=True)
class Vocabulary:
    """Fixed token inventory: all template words plus the identity token."""

    tokens: tuple[str, ...]

    @classmethod
    def from_templates(cls, templates: tuple[str, ...] = DEFAULT_TEMPLATES) -> "Vocabulary":
        words: list[str] = []
        for tpl in templates:
            for word in tpl.split():
                if word not in words:
                    words.append(word)
        if ID_TOKEN not in words:
            words.append(ID_TOKEN)
        return cls(tokens=tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def id_token_index(self) -> int:
        return self.tokens.index(ID_TOKEN)

    def index(self, word: str) -> int:
        try:
            return self.tokens.index(word)
        except ValueError:
            raise ValueError(f"word {word!r} not in vocabulary") from None


@dataclass(frozen=True)
class PromptTemplate:
    """Token-id sequence containing exactly one identity-token slot."""

    token_ids: tuple[int, ...]
    slot_index: int

    def __post_init__(self) -> None:
        if not 0 <= self.slot_index < len(self.token_ids):
            raise ValueError("slot_index outside the token sequence")

    @classmethod
    def parse(cls, text: str, vocab: Vocabulary) -> "PromptTemplate":
        words = text.split()
        slots = [i for i, w in enumerate(words) if w == ID_TOKEN]
        if len(slots) != 1:
            raise ValueError(f"prompt must contain exactly one {ID_TOKEN}, got {len(slots)}")
        return cls(token_ids=tuple(vocab.index(w) for w in words), slot_index=slots[0])


class TextEncoderStub:
    """Embedding table (vocab x dim) pooled by a scaled sum over prompt tokens."""

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        self.table = table

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def encode(self, prompt: PromptTemplate) -> np.ndarray:
        ids = np.asarray(prompt.token_ids)
        if ids.max() >= self.vocab_size:
            raise ValueError("prompt token id outside the embedding table")
        return self.table[ids].sum(axis=0) / np.sqrt(len(prompt.token_ids))

    def grad_rows(self, prompt: PromptTemplate, g_c: np.ndarray) -> np.ndarray:
        """Gradient of the pooled embedding w.r.t. the table (same shape)."""
        g = np.zeros_like(self.table)
        scale = 1.0 / np.sqrt(len(prompt.token_ids))
        for tok in prompt.token_ids:
            g[tok] += scale * g_c
        return g

    def copy(self) -> "TextEncoderStub":
        return TextEncoderStub(self.table.copy())

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.table.tobytes())
        return h.hexdigest()[:16]


def init_encoder(vocab: Vocabulary, dim: int, rng: RngState) -> TextEncoderStub:
    return TextEncoderStub(rng.normal((len(vocab), dim)))
