"""Universal cloak optimization.

The cloak is a single l-infinity-bounded perturbation reused across all of
one identity's images.  It is optimized against a frozen personalized
denoiser by making the model's noise prediction at a cloaked latent diverge
from its prediction at the clean latent:

    objective(delta) = || eps(x_t, t, c) - eps(x_t_cloaked, t, c) ||^2

where x_t_cloaked estimates a clean image from x_t, adds delta, and
reprojects back to timestep t.  Conditions c are drawn from the identity
subspace and latents x_t from the truncated reverse chain, so the objective
covers the person's whole modeled distribution rather than a fixed image
set.

Updates use signed-gradient ascent with clipping into the eta-ball, plus
inner-loop gradient aggregation: each outer iteration accumulates gradients
from several inner draws (each taken at a surrogate cloak that is itself
updated between draws) before committing one outer update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import sample_latent
from .errors import NumericError
from .identity import IdentitySubspace, sample_condition
from .model import DenoiserModel
from .rng import RngState
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class CloakOptConfig:
    """Knobs for :func:`optimize_cloak`.

    ``eta`` is the l-infinity budget in image space, ``alpha`` the signed
    step size.  Each of the ``n_outer`` iterations aggregates gradients
    over ``m_inner`` fresh (condition, timestep, latent) draws.
    ``t_min``/``t_max`` bound the sampled diffusion timestep;
    ``sampler_steps`` is the reverse-chain step count used to synthesize
    each x_t.  ``pre_search`` moves a surrogate cloak between inner draws
    so later draws see a stronger perturbation; ``scale_by_signal``
    weights each accumulated gradient by the signal rate at its timestep
    (the exact chain-rule factor from latent space back to image space).

    ``random_start`` seeds the search at a uniform draw inside the eta
    ball.  delta = 0 is an exact critical point of the divergence
    objective (zero value, zero gradient, and sign(0) = 0 freezes PGD
    there), so a deterministic zero start would never move.

    ``x0_clip`` bounds the clean estimate inside the reverse chain that
    synthesizes each latent (see :func:`cloakkit.diffusion.ddim_step`).
    Unbounded chains can drift far outside the data range and saturate
    the denoiser, which zeroes the very gradients the ascent needs.
    """

    eta: float = 16.0 / 255.0
    alpha: float = 0.05
    n_outer: int = 200
    m_inner: int = 10
    sampler_steps: int = 50
    t_min: int = 1
    t_max: int | None = None
    pre_search: bool = True
    scale_by_signal: bool = True
    random_start: bool = True
    truncation: float = 3.0
    x0_clip: tuple[float, float] | None = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta < 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.n_outer < 0 or self.m_inner < 1:
            raise ValueError(
                f"need n_outer >= 0 and m_inner >= 1, got {self.n_outer}, {self.m_inner}"
            )
        if self.sampler_steps < 1:
            raise ValueError(f"sampler_steps must be >= 1, got {self.sampler_steps}")


@dataclass
class Cloak:
    """A crafted perturbation plus the provenance needed to audit it.

    ``delta`` lives in image space and satisfies ``max|delta| <= eta``.
    ``norm_history`` records ``max|delta|`` after every outer update.
    """

    delta: np.ndarray
    eta: float
    alpha: float
    iterations: int
    model_hash: str
    subspace_hash: str
    seed: int = 0
    norm_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.delta = np.asarray(self.delta, dtype=np.float64)
        peak = float(np.max(np.abs(self.delta))) if self.delta.size else 0.0
        if peak > self.eta + 1e-12:
            raise ValueError(f"cloak exceeds budget: max|delta|={peak} > eta={self.eta}")

    def inf_norm(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def apply_cloak_latent(
    x_t: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    delta: np.ndarray,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Inject an image-space cloak into a latent at timestep ``t``.

    Conceptually: estimate the clean image from (x_t, eps_pred), add delta,
    then re-diffuse with the same predicted noise.  That composition
    collapses algebraically to ``x_t + signal(t) * delta`` (the prediction
    cancels), which is what is computed: the direct form keeps delta = 0 an
    exact identity instead of leaving last-ulp residue from the round trip.
    """

    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x_t.shape != delta.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs delta {delta.shape}")
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps_pred {eps_pred.shape}")
    return x_t + sched.signal(t) * delta


def cloak_objective(
    model: DenoiserModel,
    x_t: np.ndarray,
    x_t_cloaked: np.ndarray,
    t: int,
    c: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Prediction-divergence objective and its gradient.

    Returns ``(value, grad)`` where ``value = ||e_clean - e_cloaked||^2``
    and ``grad`` is d(value)/d(x_t_cloaked).  The clean-branch prediction
    is treated as a constant: only the cloaked branch is differentiated,
    matching an attacker-side objective that pushes the cloaked prediction
    away from a fixed reference.
    """

    e_clean = model.forward(x_t, t, c)
    e_cloaked, cache = model.forward_cached(x_t_cloaked, t, c)
    resid = e_cloaked - e_clean
    value = float(np.sum(resid * resid))
    grads = model.backward(cache, 2.0 * resid, wrt=("x",))
    return value, grads["x"]


def pgd_step(delta: np.ndarray, grad: np.ndarray, alpha: float, eta: float) -> np.ndarray:
    """One signed-gradient ascent step projected into the eta-ball.

    ``sign(0) == 0``, so zero-gradient coordinates do not move.
    """

    delta = np.asarray(delta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if delta.shape != grad.shape:
        raise ValueError(f"shape mismatch: delta {delta.shape} vs grad {grad.shape}")
    return np.clip(delta + alpha * np.sign(grad), -eta, eta)


def optimize_cloak(
    model: DenoiserModel,
    subspace: IdentitySubspace,
    cfg: CloakOptConfig,
    sched: NoiseSchedule,
    rng: RngState,
    image_dim: int | None = None,
) -> Cloak:
    """Craft a universal cloak against a frozen personalized model.

    Per outer iteration: reset the surrogate cloak to the committed one and
    zero the gradient accumulator; then for each inner draw sample a
    condition from the subspace, a timestep, and a latent from the
    truncated reverse chain, inject the surrogate cloak, accumulate the
    objective gradient (mapped to image space), and optionally advance the
    surrogate by one signed step.  Commit one outer signed step from the
    accumulated gradient.  The rng stream is consumed in a fixed order:
    one optional uniform start draw, then per inner iteration condition,
    timestep, reverse-chain noise.  n_outer = 0 skips the start draw and
    returns the zero cloak.
    """

    dim = image_dim if image_dim is not None else model.arch.input_dim
    if dim != model.arch.input_dim:
        raise ValueError(f"image_dim {dim} != model input_dim {model.arch.input_dim}")
    t_max = cfg.t_max if cfg.t_max is not None else sched.T
    if not 1 <= cfg.t_min <= t_max <= sched.T:
        raise ValueError(
            f"need 1 <= t_min <= t_max <= T, got t_min={cfg.t_min}, t_max={t_max}, T={sched.T}"
        )

    delta = np.zeros(dim, dtype=np.float64)
    if cfg.random_start and cfg.n_outer > 0:
        delta = rng.uniform(-cfg.eta, cfg.eta, dim)
    history: list[float] = []
    for _ in range(cfg.n_outer):
        delta_inner = delta.copy()
        g_agg = np.zeros(dim, dtype=np.float64)
        for _ in range(cfg.m_inner):
            c = sample_condition(subspace, rng, truncation=cfg.truncation)
            t = int(rng.randint(cfg.t_min, t_max))
            x_t = sample_latent(
                model, c, t, cfg.sampler_steps, rng, sched, shape=(dim,), x0_clip=cfg.x0_clip
            )
            eps_pred = model.forward(x_t, t, c)
            x_t_cloaked = apply_cloak_latent(x_t, t, eps_pred, delta_inner, sched)
            _, g_latent = cloak_objective(model, x_t, x_t_cloaked, t, c)
            if not np.all(np.isfinite(g_latent)):
                raise NumericError("non-finite cloak gradient; lower alpha or timestep range")
            g_image = sched.signal(t) * g_latent if cfg.scale_by_signal else g_latent
            g_agg += g_image
            if cfg.pre_search:
                delta_inner = pgd_step(delta_inner, g_image, cfg.alpha, cfg.eta)
        delta = pgd_step(delta, g_agg, cfg.alpha, cfg.eta)
        history.append(float(np.max(np.abs(delta))))

    return Cloak(
        delta=delta,
        eta=cfg.eta,
        alpha=cfg.alpha,
        iterations=cfg.n_outer,
        model_hash=model.params_hash(),
        subspace_hash=subspace.content_hash(),
        seed=rng.seed,
        norm_history=history,
    )


def apply_cloak_image(
    image: np.ndarray, cloak: Cloak, clamp: tuple[float, float] | None = None
) -> np.ndarray:
    """Add the cloak to one image, optionally clamping to a value range."""

    image = np.asarray(image, dtype=np.float64)
    if image.shape != cloak.delta.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs delta {cloak.delta.shape}")
    out = image + cloak.delta
    if clamp is not None:
        lo, hi = clamp
        if lo > hi:
            raise ValueError(f"bad clamp range: ({lo}, {hi})")
        out = np.clip(out, lo, hi)
    return out
