"""Identity subspace learning.

Three stages over a small per-person image set:

1. ``learn_identity`` fine-tunes the denoiser and the encoder jointly so the
   identity token's pooled embedding binds to the person.
2. ``diversify_contexts`` prompt-tunes one soft embedding per image, starting
   from the core identity point, so the anchors pick up each image's context.
3. ``estimate_subspace`` fits a diagonal Gaussian (mean, per-dim std) over
   the anchors; ``sample_condition`` draws conditions from it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import denoise_loss_at
from .errors import NumericError
from .model import DenoiserModel
from .rng import RngState
from .schedule import NoiseSchedule
from .textenc import PromptTemplate, TextEncoderStub

__all__ = [
    "AnchorSet",
    "IdentitySubspace",
    "learn_identity",
    "core_identity",
    "diversify_contexts",
    "estimate_subspace",
    "sample_condition",
]


@dataclass
class AnchorSet:
    """One soft condition embedding per training image."""

    anchors: np.ndarray  # (N, dim)
    image_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 2:
            raise ValueError("anchors must be a (N, dim) array")
        if len(self.image_ids) != self.anchors.shape[0]:
            raise ValueError("one image id per anchor required")


@dataclass
class IdentitySubspace:
    """Diagonal Gaussian over condition embeddings."""

    mu: np.ndarray
    sigma: np.ndarray
    n_anchors: int = 0
    ddof: int = 1

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be 1-D and the same length")
        if np.any(self.sigma < 0.0):
            raise ValueError("sigma must be elementwise nonnegative")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def point(cls, c: np.ndarray) -> "IdentitySubspace":
        """Degenerate subspace concentrated on a single condition."""
        c = np.asarray(c, dtype=np.float64)
        return cls(mu=c.copy(), sigma=np.zeros_like(c), n_anchors=1)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.mu.tobytes())
        h.update(self.sigma.tobytes())
        return h.hexdigest()[:16]


def learn_identity(
    train_images: list[np.ndarray] | np.ndarray,
    model: DenoiserModel,
    encoder: TextEncoderStub,
    prompt: PromptTemplate,
    steps: int,
    lr: float,
    rng: RngState,
    sched: NoiseSchedule,
) -> tuple[DenoiserModel, TextEncoderStub]:
    """Bind the identity to the prompt by joint gradient steps on (theta, tau).

    Each step samples one image, one timestep, and one noise draw, then takes
    a plain gradient step on the summed-square denoising loss through both
    the network parameters and the rows of the embedding table used by the
    prompt.  steps=0 returns untouched copies.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    images = [np.asarray(x, dtype=np.float64) for x in train_images]
    if not images and steps > 0:
        raise ValueError("cannot personalize on an empty training set")
    model = model.copy()
    encoder = encoder.copy()
    for _ in range(steps):
        x0 = images[rng.choice(len(images))]
        t = rng.randint(1, sched.T)
        eps = rng.normal(x0.shape)
        c = encoder.encode(prompt)
        loss, grads = denoise_loss_at(model, x0, c, t, eps, sched, wrt=("theta", "c"))
        if not np.isfinite(loss):
            raise NumericError(f"identity learning diverged (loss={loss})")
        model.params -= lr * grads["theta"]
        encoder.table -= lr * encoder.grad_rows(prompt, grads["c"])
        model.loss_curve.append(loss)
    return model, encoder


def core_identity(encoder: TextEncoderStub, prompt: PromptTemplate) -> np.ndarray:
    """The prompt's pooled embedding after (or before) identity learning."""
    return encoder.encode(prompt)


def diversify_contexts(
    train_images: list[np.ndarray] | np.ndarray,
    model: DenoiserModel,
    c_id: np.ndarray,
    steps: int,
    lr: float,
    rng: RngState,
    sched: NoiseSchedule,
    *,
    batch_size: int = 1,
) -> AnchorSet:
    """Prompt-tune one anchor per image from the core identity point.

    The model stays frozen; only each anchor c_j moves, by plain gradient
    descent on the summed-square denoising loss of its own image.  Every
    anchor owns a child rng stream derived from its index, so anchors are
    independent and could be updated in parallel.  steps=0 returns exact
    copies of c_id.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    c_id = np.asarray(c_id, dtype=np.float64)
    images = [np.asarray(x, dtype=np.float64) for x in train_images]
    anchors = np.tile(c_id, (len(images), 1))
    for j, x0 in enumerate(images):
        stream = rng.derive(j)
        for _ in range(steps):
            g = np.zeros_like(c_id)
            for _ in range(batch_size):
                t = stream.randint(1, sched.T)
                eps = stream.normal(x0.shape)
                loss, grads = denoise_loss_at(model, x0, anchors[j], t, eps, sched, wrt=("c",))
                if not np.isfinite(loss):
                    raise NumericError(f"prompt tuning diverged (loss={loss})")
                g += grads["c"]
            anchors[j] -= lr * (g / batch_size)
    return AnchorSet(anchors=anchors, image_ids=tuple(range(len(images))))


def estimate_subspace(anchor_set: AnchorSet, ddof: int = 1) -> IdentitySubspace:
    """Per-dimension mean and sample standard deviation over the anchors.

    The default divisor is N-1 (unbiased); a single anchor yields sigma = 0.
    """
    anchors = anchor_set.anchors
    n = anchors.shape[0]
    if n < 1:
        raise ValueError("need at least one anchor")
    mu = anchors.mean(axis=0)
    if n <= ddof:
        sigma = np.zeros_like(mu)
    else:
        sigma = anchors.std(axis=0, ddof=ddof)
    return IdentitySubspace(mu=mu, sigma=sigma, n_anchors=n, ddof=ddof)


def sample_condition(
    subspace: IdentitySubspace,
    rng: RngState,
    truncation: float = 3.0,
) -> np.ndarray:
    """Draw c = mu + sigma * z with z ~ N(0, I) clamped to +-truncation."""
    if truncation <= 0.0:
        raise ValueError("truncation must be positive")
    z = rng.normal(subspace.mu.shape)
    z = np.clip(z, -truncation, truncation)
    return subspace.mu + subspace.sigma * z
