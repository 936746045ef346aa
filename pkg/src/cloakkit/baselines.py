"""Reference cloaking methods the universal cloak is compared against.

Two baselines, both ascending the personalized model's denoising loss on
perturbed training images rather than using subspace-sampled latents:

* image-specific: an independent cloak per training image.  Protecting
  unseen images then requires transferring some training image's cloak,
  which is the weakness the universal method addresses.
* gradient-averaged universal: one shared cloak updated with the average
  of the per-image gradients, so a single delta covers the whole train set
  but is still anchored to those fixed images.

Each image index gets its own derived rng stream.  With one training image
the gradient-averaged loop therefore consumes exactly the draws of that
image's image-specific loop, making the two trajectories bit-identical,
which the test suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloak import Cloak, pgd_step
from .diffusion import denoise_loss_at
from .errors import NumericError
from .model import DenoiserModel
from .rng import RngState
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class BaselineConfig:
    """Budget and schedule knobs shared by both baseline methods."""

    eta: float = 16.0 / 255.0
    alpha: float = 0.05
    steps: int = 200
    t_min: int = 1
    t_max: int | None = None

    def __post_init__(self) -> None:
        if self.eta < 0.0 or self.alpha < 0.0 or self.steps < 0:
            raise ValueError("eta, alpha and steps must be nonnegative")


def _delta_gradient(
    model: DenoiserModel,
    image: np.ndarray,
    delta: np.ndarray,
    c: np.ndarray,
    t: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Gradient of the denoising loss at (image + delta) w.r.t. delta.

    The loss differentiates w.r.t. the diffused latent; the chain back to
    image space contributes the signal rate at t.
    """

    _, grads = denoise_loss_at(model, image + delta, c, t, eps, sched, wrt=("x",))
    g = sched.signal(t) * grads["x"]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite baseline cloak gradient")
    return g


def image_specific_cloaks(
    model: DenoiserModel,
    images: list[np.ndarray],
    c: np.ndarray,
    cfg: BaselineConfig,
    sched: NoiseSchedule,
    rng: RngState,
) -> list[Cloak]:
    """One independent loss-ascent cloak per training image."""

    if not images:
        raise ValueError("need at least one image")
    t_max = cfg.t_max if cfg.t_max is not None else sched.T
    cloaks: list[Cloak] = []
    for i, image in enumerate(images):
        image = np.asarray(image, dtype=np.float64)
        stream = rng.derive(i)
        delta = np.zeros_like(image)
        history: list[float] = []
        for _ in range(cfg.steps):
            t = int(stream.randint(cfg.t_min, t_max))
            eps = stream.normal(image.shape)
            g = _delta_gradient(model, image, delta, c, t, eps, sched)
            delta = pgd_step(delta, g, cfg.alpha, cfg.eta)
            history.append(float(np.max(np.abs(delta))))
        cloaks.append(
            Cloak(
                delta=delta,
                eta=cfg.eta,
                alpha=cfg.alpha,
                iterations=cfg.steps,
                model_hash=model.params_hash(),
                subspace_hash="",
                seed=rng.seed,
                norm_history=history,
            )
        )
    return cloaks


def gradient_avg_cloak(
    model: DenoiserModel,
    images: list[np.ndarray],
    c: np.ndarray,
    cfg: BaselineConfig,
    sched: NoiseSchedule,
    rng: RngState,
) -> Cloak:
    """One shared cloak updated with per-image gradients averaged each step."""

    if not images:
        raise ValueError("need at least one image")
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("images must share one shape")
    t_max = cfg.t_max if cfg.t_max is not None else sched.T
    streams = [rng.derive(i) for i in range(len(arrs))]
    delta = np.zeros_like(arrs[0])
    history: list[float] = []
    for _ in range(cfg.steps):
        g_sum = np.zeros_like(delta)
        for image, stream in zip(arrs, streams):
            t = int(stream.randint(cfg.t_min, t_max))
            eps = stream.normal(image.shape)
            g_sum += _delta_gradient(model, image, delta, c, t, eps, sched)
        delta = pgd_step(delta, g_sum / len(arrs), cfg.alpha, cfg.eta)
        history.append(float(np.max(np.abs(delta))))
    return Cloak(
        delta=delta,
        eta=cfg.eta,
        alpha=cfg.alpha,
        iterations=cfg.steps,
        model_hash=model.params_hash(),
        subspace_hash="",
        seed=rng.seed,
        norm_history=history,
    )


def transfer_assignment(n_targets: int, n_cloaks: int, rng: RngState) -> list[int]:
    """Random cloak index per target image, for cross-image cloak transfer."""

    if n_targets < 0 or n_cloaks < 1:
        raise ValueError("need n_targets >= 0 and n_cloaks >= 1")
    return [rng.choice(n_cloaks) for _ in range(n_targets)]
