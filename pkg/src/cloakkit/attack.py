"""Attacker-side personalization and generation.

Simulates the adversary: given a handful of published (possibly cloaked)
images of one person, fine-tune a base conditional denoiser so a pseudo-token
prompt reproduces that person, then sample images from the tuned model.

Three personalization methods with strictly scoped parameter updates:

* ``full_finetune``: all denoiser parameters plus the text-encoder table.
* ``low_rank``: rank-r additive factors on the input-path weight matrices
  only; everything else, including the encoder, stays bit-identical.
* ``embedding_only``: just the pseudo-token's embedding row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import sample_latent_batch
from .errors import NumericError
from .model import DenoiserModel
from .optim import make_optimizer
from .rng import RngState
from .schedule import NoiseSchedule
from .textenc import PromptTemplate, TextEncoderStub

ATTACK_METHODS = ("full_finetune", "low_rank", "embedding_only")


@dataclass(frozen=True)
class AttackConfig:
    """Personalization method and budget for :func:`personalize_attack`."""

    method: str = "full_finetune"
    steps: int = 1000
    lr: float = 1e-3
    rank: int = 2
    batch_size: int = 4
    prompt_index: int = 0
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; pick from {ATTACK_METHODS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.method == "low_rank" and self.rank < 1:
            raise ValueError("rank must be >= 1 for low_rank")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def low_rank_slices(model: DenoiserModel) -> list[str]:
    """Weight matrices that receive low-rank factors: the x-path mats."""

    return [f"h{l}.w" for l in range(len(model.arch.widths))] + ["out.w"]


def _draw_batch(
    published: np.ndarray, cfg: AttackConfig, sched: NoiseSchedule, rng: RngState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x_t batch, per-row timesteps, target noise); one rng draw order."""

    idx = np.array([rng.choice(len(published)) for _ in range(cfg.batch_size)])
    ts = np.asarray(rng.randint(1, sched.T, cfg.batch_size))
    eps = rng.normal((cfg.batch_size, published.shape[1]))
    sig = np.sqrt(sched.alpha_bar[ts])[:, None]
    noi = np.sqrt(1.0 - sched.alpha_bar[ts])[:, None]
    return sig * published[idx] + noi * eps, ts, eps


def personalize_attack(
    published: list[np.ndarray],
    base: DenoiserModel,
    encoder: TextEncoderStub,
    prompt: PromptTemplate,
    cfg: AttackConfig,
    sched: NoiseSchedule,
    rng: RngState,
) -> tuple[DenoiserModel, TextEncoderStub]:
    """Fine-tune (base, encoder) on published images; returns tuned copies.

    The inputs are never mutated.  Methods other than full_finetune leave
    all parameters outside their declared slices bit-identical.
    """

    if not published:
        raise ValueError("need at least one published image")
    xs = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in published])
    if xs.shape[1] != base.arch.input_dim:
        raise ValueError(f"images have dim {xs.shape[1]}, model expects {base.arch.input_dim}")
    model = base.copy()
    enc = encoder.copy()
    if cfg.steps == 0:
        return model, enc

    if cfg.method == "full_finetune":
        _train_full(xs, model, enc, prompt, cfg, sched, rng)
    elif cfg.method == "low_rank":
        _train_low_rank(xs, model, enc, prompt, cfg, sched, rng)
    else:
        _train_embedding_only(xs, model, enc, prompt, cfg, sched, rng)
    return model, enc


def _loss_guard(loss: float, method: str) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"{method} personalization diverged (loss={loss})")


def _train_full(xs, model, enc, prompt, cfg, sched, rng) -> None:
    opt_theta = make_optimizer(cfg.optimizer, cfg.lr)
    opt_table = make_optimizer(cfg.optimizer, cfg.lr)
    table_flat = enc.table.reshape(-1)
    for _ in range(cfg.steps):
        x_t, ts, eps = _draw_batch(xs, cfg, sched, rng)
        c = enc.encode(prompt)
        pred, cache = model.forward_cached(x_t, ts, c)
        resid = pred - eps
        _loss_guard(float(np.einsum("bi,bi->", resid, resid)) / cfg.batch_size, cfg.method)
        grads = model.backward(cache, 2.0 * resid, wrt=("theta", "c"))
        g_c = grads["c"].sum(axis=0)
        g_table = enc.grad_rows(prompt, g_c)
        opt_theta.step(model.params, grads["theta"] / cfg.batch_size)
        opt_table.step(table_flat, g_table.reshape(-1) / cfg.batch_size)


def _train_low_rank(xs, model, enc, prompt, cfg, sched, rng) -> None:
    names = low_rank_slices(model)
    shapes = {name: model.slice(name).shape for name in names}
    bounds: dict[str, tuple[int, int]] = {}
    off = 0
    for name in names:
        rows, cols = shapes[name]
        bounds[name] = (off, off + rows * cfg.rank + cfg.rank * cols)
        off = bounds[name][1]
    factors = np.zeros(off)
    for name in names:
        rows, _ = shapes[name]
        lo, _ = bounds[name]
        # left factor Gaussian, right factor zero: the product starts at 0
        factors[lo : lo + rows * cfg.rank] = rng.normal((rows * cfg.rank,)) / np.sqrt(cfg.rank)

    def split(name: str) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = shapes[name]
        lo, hi = bounds[name]
        p = factors[lo : lo + rows * cfg.rank].reshape(rows, cfg.rank)
        q = factors[lo + rows * cfg.rank : hi].reshape(cfg.rank, cols)
        return p, q

    base_params = model.params.copy()
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    c = enc.encode(prompt)
    g_factors = np.zeros_like(factors)
    for _ in range(cfg.steps):
        model.params[:] = base_params
        for name in names:
            p, q = split(name)
            lo, hi = model.slice_bounds(name)
            model.params[lo:hi] += (p @ q).ravel()
        x_t, ts, eps = _draw_batch(xs, cfg, sched, rng)
        pred, cache = model.forward_cached(x_t, ts, c)
        resid = pred - eps
        _loss_guard(float(np.einsum("bi,bi->", resid, resid)) / cfg.batch_size, cfg.method)
        grads = model.backward(cache, 2.0 * resid, wrt=("theta",))
        for name in names:
            p, q = split(name)
            rows, cols = shapes[name]
            lo_t, hi_t = model.slice_bounds(name)
            g_w = grads["theta"][lo_t:hi_t].reshape(rows, cols)
            lo, hi = bounds[name]
            g_factors[lo : lo + rows * cfg.rank] = (g_w @ q.T).ravel()
            g_factors[lo + rows * cfg.rank : hi] = (p.T @ g_w).ravel()
        opt.step(factors, g_factors / cfg.batch_size)
    model.params[:] = base_params
    for name in names:
        p, q = split(name)
        lo, hi = model.slice_bounds(name)
        model.params[lo:hi] += (p @ q).ravel()


def _train_embedding_only(xs, model, enc, prompt, cfg, sched, rng) -> None:
    row_index = prompt.token_ids[prompt.slot_index]
    row = enc.table[row_index]
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    for _ in range(cfg.steps):
        x_t, ts, eps = _draw_batch(xs, cfg, sched, rng)
        c = enc.encode(prompt)
        pred, cache = model.forward_cached(x_t, ts, c)
        resid = pred - eps
        _loss_guard(float(np.einsum("bi,bi->", resid, resid)) / cfg.batch_size, cfg.method)
        grads = model.backward(cache, 2.0 * resid, wrt=("c",))
        g_row = enc.grad_rows(prompt, grads["c"].sum(axis=0))[row_index]
        opt.step(row, g_row / cfg.batch_size)


def generate_batch(
    model: DenoiserModel,
    encoder: TextEncoderStub,
    prompt: PromptTemplate,
    n: int,
    rng: RngState,
    sched: NoiseSchedule,
    steps: int = 50,
    clamp: tuple[float, float] | None = (0.0, 1.0),
    x0_clip: tuple[float, float] | None = (0.0, 1.0),
) -> np.ndarray:
    """Draw n full reverse-chain samples conditioned on the prompt.

    ``x0_clip`` bounds the clean estimate inside every reverse step (see
    :func:`cloakkit.diffusion.ddim_step`); without it, prediction error
    compounds over the chain and the final clamp erases most of the image.
    ``clamp`` is applied once to the finished samples.
    """

    if n < 1:
        raise ValueError("n must be >= 1")
    c = encoder.encode(prompt)
    out = sample_latent_batch(model, c, 0, steps, rng, sched, n=n, x0_clip=x0_clip)
    if not np.all(np.isfinite(out)):
        raise NumericError("generation produced non-finite values")
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out
