"""Forward corruption, DDIM stepping, sampling, and denoiser training.

All tensors are float64 numpy arrays; images may be any shape (they are
flattened for the network and reshaped back).  The forward process and its
algebraic inversions follow

    x_t    = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps
    x0_hat = (x_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t)

with ab_t = alpha_bar[t].  The deterministic reverse step recombines the
clean estimate at an earlier timestep:

    x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_pred
             + sigma eps_extra
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError
from .model import DenoiserModel
from .optim import make_optimizer
from .rng import RngState
from .schedule import NoiseSchedule

__all__ = [
    "forward_diffuse",
    "predict_x0",
    "ddim_step",
    "ddim_timegrid",
    "sample_latent",
    "sample_latent_batch",
    "denoise_loss",
    "denoise_loss_at",
    "train_denoiser",
]


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt x0 to timestep t with the given noise draw."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0, eps, "forward_diffuse")
    return sched.signal(t) * x0 + sched.noise(t) * eps


def predict_x0(x_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward process given a noise prediction; needs t >= 1."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_same_shape(x_t, eps_pred, "predict_x0")
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ValueError(f"predict_x0 needs 1 <= t <= T, got t={t}")
    ab = sched.alpha_bar[t]
    if ab <= 0.0:
        raise NumericError(f"alpha_bar[{t}] is not positive")
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_pred: np.ndarray,
    sigma_t: float,
    eps_extra: np.ndarray | None,
    sched: NoiseSchedule,
    *,
    x0_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """One reverse step t -> t_prev; deterministic when sigma_t = 0.

    ``x0_clip`` optionally clips the clean estimate to a (lo, hi) data range
    before recombination while keeping the raw noise prediction for the
    direction term.  Without it, a prediction error e at step t propagates to
    the next latent scaled by sqrt(ab_prev / ab_t) > 1, so long chains can
    amplify early errors by 1 / sqrt(ab_T); the clip caps that feedback.
    """
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}")
    if sigma_t < 0.0:
        raise ValueError("sigma_t must be nonnegative")
    ab_prev = sched.alpha_bar[t_prev]
    direction_sq = 1.0 - ab_prev - sigma_t**2
    if direction_sq < 0.0:
        raise ValueError(f"sigma_t={sigma_t} too large for alpha_bar[{t_prev}]={ab_prev}")
    x0_hat = predict_x0(x_t, t, eps_pred, sched)
    if x0_clip is not None:
        lo, hi = float(x0_clip[0]), float(x0_clip[1])
        if not lo < hi:
            raise ValueError(f"x0_clip needs lo < hi, got ({lo}, {hi})")
        x0_hat = np.clip(x0_hat, lo, hi)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(direction_sq) * eps_pred
    if sigma_t > 0.0:
        if eps_extra is None:
            raise ValueError("sigma_t > 0 requires an eps_extra draw")
        _check_same_shape(np.asarray(eps_extra), x_t, "ddim_step")
        out = out + sigma_t * np.asarray(eps_extra, dtype=np.float64)
    return out


def ddim_timegrid(T: int, t_stop: int, steps: int) -> np.ndarray:
    """Descending timestep grid from T to t_stop with ``steps`` intervals.

    Grid points are rounded from an even spacing and deduplicated, so short
    gaps degenerate gracefully (t_stop = T yields the single point [T]).
    """
    if not 0 <= t_stop <= T:
        raise ValueError(f"t_stop must lie in [0, T], got {t_stop}")
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T], got {steps}")
    grid = np.unique(np.round(np.linspace(t_stop, T, steps + 1)).astype(np.int64))
    return grid[::-1]


def sample_latent(
    model: DenoiserModel,
    c: np.ndarray,
    t_stop: int,
    steps: int,
    rng: RngState,
    sched: NoiseSchedule,
    shape: tuple[int, ...] | None = None,
    x0_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Run the deterministic reverse chain from pure noise at T down to t_stop.

    Draws x_T ~ N(0, I), then applies DDIM steps with sigma = 0 along an
    evenly spaced timestep grid.  t_stop = 0 yields a full sample.  ``shape``
    defaults to the flat model input dimension; ``x0_clip`` is forwarded to
    every :func:`ddim_step`.
    """
    out = sample_latent_batch(
        model, c, t_stop, steps, rng, sched, n=1, shape=shape, x0_clip=x0_clip
    )
    return out[0]


def sample_latent_batch(
    model: DenoiserModel,
    c: np.ndarray,
    t_stop: int,
    steps: int,
    rng: RngState,
    sched: NoiseSchedule,
    n: int = 1,
    shape: tuple[int, ...] | None = None,
    x0_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Vectorized variant of :func:`sample_latent`: n chains under one condition."""
    if shape is None:
        shape = (model.arch.input_dim,)
    grid = ddim_timegrid(sched.T, t_stop, steps)
    x = rng.normal((n, int(np.prod(shape))))
    for i in range(len(grid) - 1):
        t, t_prev = int(grid[i]), int(grid[i + 1])
        eps_pred = model.forward(x, t, c)
        x = ddim_step(x, t, t_prev, eps_pred, 0.0, None, sched, x0_clip=x0_clip)
    return x.reshape((n, *shape))


def denoise_loss_at(
    model: DenoiserModel,
    x0: np.ndarray,
    c: np.ndarray,
    t: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
    *,
    wrt: tuple[str, ...] = ("theta",),
) -> tuple[float, dict[str, np.ndarray]]:
    """Squared-error denoising loss at a fixed (t, eps) draw, with gradients.

    loss = || eps - eps_pred(x_t, t, c) ||^2 summed over all entries, with
    x_t = forward_diffuse(x0, t, eps).  ``wrt`` may request "theta", "x"
    (gradient w.r.t. x_t), and/or "c".
    """
    x0 = np.asarray(x0, dtype=np.float64)
    flat_x0 = x0.reshape(-1)
    flat_eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    if flat_x0.shape != flat_eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {x0.shape} vs {np.asarray(eps).shape}")
    x_t = forward_diffuse(flat_x0, t, flat_eps, sched)
    pred, cache = model.forward_cached(x_t, t, np.asarray(c, dtype=np.float64))
    resid = pred - flat_eps
    loss = float(resid @ resid)
    grads = model.backward(cache, 2.0 * resid, wrt=wrt)
    return loss, grads


def denoise_loss(
    model: DenoiserModel,
    x0: np.ndarray,
    c: np.ndarray,
    rng: RngState,
    sched: NoiseSchedule,
) -> tuple[float, np.ndarray]:
    """Sample t ~ U{1..T} and eps ~ N(0, I); return loss and its theta-gradient."""
    t = rng.randint(1, sched.T)
    eps = rng.normal(np.asarray(x0).shape)
    loss, grads = denoise_loss_at(model, x0, c, t, eps, sched, wrt=("theta",))
    return loss, grads["theta"]


def train_denoiser(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    model: DenoiserModel,
    steps: int,
    lr: float,
    rng: RngState,
    sched: NoiseSchedule,
    *,
    optimizer: str = "adam",
    batch_size: int = 16,
) -> DenoiserModel:
    """Train a denoiser on (image, condition) pairs; returns a new model.

    Each step draws ``batch_size`` examples with replacement, independent
    (t, eps) per example, and averages the per-example summed-square losses.
    The input model is left untouched; the returned model carries the loss
    curve in ``loss_curve``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    out = model.copy()
    if steps == 0:
        return out
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    xs = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x, _ in dataset])
    cs = np.stack([np.asarray(c, dtype=np.float64) for _, c in dataset])
    opt = make_optimizer(optimizer, lr)
    for _ in range(steps):
        idx = np.array([rng.choice(len(dataset)) for _ in range(batch_size)])
        ts = np.asarray(rng.randint(1, sched.T, batch_size))
        eps = rng.normal((batch_size, xs.shape[1]))
        sig = np.sqrt(sched.alpha_bar[ts])[:, None]
        noi = np.sqrt(1.0 - sched.alpha_bar[ts])[:, None]
        x_t = sig * xs[idx] + noi * eps
        pred, cache = out.forward_cached(x_t, ts, cs[idx])
        resid = pred - eps
        loss_mean = float(np.einsum("bi,bi->", resid, resid)) / batch_size
        if not np.isfinite(loss_mean):
            raise NumericError(f"denoiser training diverged (loss={loss_mean})")
        grads = out.backward(cache, 2.0 * resid, wrt=("theta",))
        opt.step(out.params, grads["theta"] / batch_size)
        out.loss_curve.append(loss_mean)
    return out
