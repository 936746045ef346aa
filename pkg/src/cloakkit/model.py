"""Conditional noise-prediction network with hand-written backprop.

The denoiser is a small fully connected net over flattened images.  The
input is optionally lifted with a fixed bank of random sinusoidal features
before the first layer; each hidden layer receives the previous activation
plus additive injections of a sinusoidal timestep feature vector and the
condition embedding:

    phi(x) = sin(P x + b)          P, b fixed at construction, not trained
    h_0 = [x, phi(x)]
    z_l = h_{l-1} W_l^T + s(t) U_l^T + c V_l^T + b_l
    h_l = tanh(z_l)
    eps_pred = h_L Wout^T + bout

The random-feature lift plays the role a deep feature encoder plays at full
scale: small input perturbations aligned with rows of P rotate feature
phases far more than random noise does, so input-space sensitivity is
available to gradient-based crafting while random corruptions stay benign.

Everything runs in float64 numpy; forward and backward are deterministic
given (parameters, inputs).  Parameters live in one flat vector with a named
slice table, which is what the checkpoint format serializes.  Analytic
gradients are available with respect to the parameters, the input x, and the
condition c; the test suite audits all three against central finite
differences.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .rng import RngState

__all__ = ["DenoiserArch", "DenoiserModel", "init_denoiser", "timestep_features"]


@dataclass(frozen=True)
class DenoiserArch:
    """Shape descriptor: image dim, condition dim, time-feature dim, widths.

    ``feat_dim`` > 0 enables the fixed random sinusoidal input lift;
    ``feat_scale`` sets its frequency scale and ``feat_seed`` its draw.
    """

    input_dim: int
    cond_dim: int
    time_dim: int = 16
    widths: tuple[int, ...] = (128, 128)
    feat_dim: int = 0
    feat_scale: float = 6.0
    feat_seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.cond_dim < 1:
            raise ValueError("input_dim and cond_dim must be positive")
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even and >= 2")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a nonempty tuple of positive ints")
        if self.feat_dim < 0 or self.feat_scale <= 0.0:
            raise ValueError("feat_dim must be >= 0 and feat_scale positive")

    @property
    def lifted_dim(self) -> int:
        """First-layer input width: raw pixels plus random features."""
        return self.input_dim + self.feat_dim

    def slice_table(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Name -> (flat offset, shape) for every parameter block."""
        table: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0

        def add(name: str, shape: tuple[int, ...]) -> None:
            nonlocal offset
            table[name] = (offset, shape)
            offset += int(np.prod(shape))

        prev = self.lifted_dim
        for l, w in enumerate(self.widths):
            add(f"h{l}.w", (w, prev))
            add(f"h{l}.u", (w, self.time_dim))
            add(f"h{l}.v", (w, self.cond_dim))
            add(f"h{l}.b", (w,))
            prev = w
        add("out.w", (self.input_dim, prev))
        add("out.b", (self.input_dim,))
        return table

    @property
    def n_params(self) -> int:
        offset, shape = list(self.slice_table().values())[-1]
        return offset + int(np.prod(shape))

    def describe(self) -> str:
        widths = ",".join(str(w) for w in self.widths)
        return (
            f"input_dim={self.input_dim};cond_dim={self.cond_dim};"
            f"time_dim={self.time_dim};widths={widths};"
            f"feat_dim={self.feat_dim};feat_scale={self.feat_scale!r};"
            f"feat_seed={self.feat_seed}"
        )


@functools.lru_cache(maxsize=16)
def _feature_basis(arch: DenoiserArch) -> tuple[np.ndarray, np.ndarray] | None:
    """Fixed (P, b) of the input lift; None when the lift is disabled."""
    if arch.feat_dim == 0:
        return None
    rng = RngState(arch.feat_seed).derive("input-features")
    p = rng.normal((arch.feat_dim, arch.input_dim)) * (
        arch.feat_scale / math.sqrt(arch.input_dim)
    )
    b = rng.uniform(0.0, 2.0 * math.pi, arch.feat_dim)
    p.setflags(write=False)
    b.setflags(write=False)
    return p, b


def timestep_features(t: np.ndarray | int, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps; shape (..., dim)."""
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class DenoiserModel:
    """Trainable conditional denoiser eps(x_t, t, c).

    ``params`` is the flat float64 parameter vector; ``slices`` maps block
    names to views into it.  ``forward`` accepts a single example (1-D x) or
    a batch (2-D x with per-row t and c).
    """

    def __init__(self, arch: DenoiserArch, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.arch = arch
        self.params = params
        self._table = arch.slice_table()
        self.loss_curve: list[float] = []

    # -- parameter access ------------------------------------------------

    def slice(self, name: str) -> np.ndarray:
        """View of one named block, reshaped; writes affect ``params``."""
        offset, shape = self._table[name]
        return self.params[offset : offset + int(np.prod(shape))].reshape(shape)

    def slice_names(self) -> list[str]:
        return list(self._table)

    def slice_bounds(self, name: str) -> tuple[int, int]:
        offset, shape = self._table[name]
        return offset, offset + int(np.prod(shape))

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.params.copy())

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.arch.describe().encode())
        h.update(self.params.tobytes())
        return h.hexdigest()[:16]

    # -- forward / backward ----------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        t: np.ndarray | int,
        c: np.ndarray,
    ) -> np.ndarray:
        eps, _ = self._forward_impl(x, t, c, keep_cache=False)
        return eps

    def forward_cached(
        self,
        x: np.ndarray,
        t: np.ndarray | int,
        c: np.ndarray,
    ) -> tuple[np.ndarray, dict]:
        return self._forward_impl(x, t, c, keep_cache=True)

    def _forward_impl(self, x, t, c, keep_cache):
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        cb = c[None, :] if c.ndim == 1 else c
        if xb.shape[1] != self.arch.input_dim:
            raise ValueError(f"x has dim {xb.shape[1]}, model expects {self.arch.input_dim}")
        if cb.shape[1] != self.arch.cond_dim:
            raise ValueError(f"c has dim {cb.shape[1]}, model expects {self.arch.cond_dim}")
        if cb.shape[0] == 1 and xb.shape[0] > 1:
            cb = np.broadcast_to(cb, (xb.shape[0], cb.shape[1]))
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        s = timestep_features(t_arr, self.arch.time_dim)

        basis = _feature_basis(self.arch)
        if basis is None:
            h0, fcos = xb, None
        else:
            p, b = basis
            angles = xb @ p.T + b
            h0 = np.concatenate([xb, np.sin(angles)], axis=1)
            fcos = np.cos(angles)

        hs = [h0]
        h = h0
        for l in range(len(self.arch.widths)):
            z = (
                h @ self.slice(f"h{l}.w").T
                + s @ self.slice(f"h{l}.u").T
                + cb @ self.slice(f"h{l}.v").T
                + self.slice(f"h{l}.b")
            )
            h = np.tanh(z)
            hs.append(h)
        eps = h @ self.slice("out.w").T + self.slice("out.b")

        cache = (
            {"hs": hs, "s": s, "c": cb, "single": single, "fcos": fcos}
            if keep_cache
            else None
        )
        return (eps[0] if single else eps), cache

    def backward(
        self,
        cache: dict,
        g_eps: np.ndarray,
        *,
        wrt: tuple[str, ...] = ("theta",),
    ) -> dict[str, np.ndarray]:
        """Pull the adjoint g_eps = dL/d eps_pred back through the net.

        ``wrt`` selects which gradients to produce: "theta" (flat vector the
        size of ``params``), "x", and/or "c".  x/c gradients come back with
        the batch layout of the forward call.
        """
        hs, s, cb, single = cache["hs"], cache["s"], cache["c"], cache["single"]
        g = np.asarray(g_eps, dtype=np.float64)
        gb = g[None, :] if single else g

        want_theta = "theta" in wrt
        want_x = "x" in wrt
        want_c = "c" in wrt
        g_theta = np.zeros_like(self.params) if want_theta else None
        g_c = np.zeros_like(cb) if want_c else None

        def stash(name: str, value: np.ndarray) -> None:
            lo, hi = self.slice_bounds(name)
            g_theta[lo:hi] = value.ravel()

        if want_theta:
            stash("out.w", gb.T @ hs[-1])
            stash("out.b", gb.sum(axis=0))
        g_h = gb @ self.slice("out.w")
        for l in range(len(self.arch.widths) - 1, -1, -1):
            g_z = g_h * (1.0 - hs[l + 1] ** 2)
            if want_theta:
                stash(f"h{l}.w", g_z.T @ hs[l])
                stash(f"h{l}.u", g_z.T @ s)
                stash(f"h{l}.v", g_z.T @ cb)
                stash(f"h{l}.b", g_z.sum(axis=0))
            if want_c:
                g_c += g_z @ self.slice(f"h{l}.v")
            g_h = g_z @ self.slice(f"h{l}.w")

        out: dict[str, np.ndarray] = {}
        if want_theta:
            out["theta"] = g_theta
        if want_x:
            basis = _feature_basis(self.arch)
            if basis is None:
                g_x = g_h
            else:
                p, _ = basis
                d = self.arch.input_dim
                g_x = g_h[:, :d] + (g_h[:, d:] * cache["fcos"]) @ p
            out["x"] = g_x[0] if single else g_x
        if want_c:
            out["c"] = g_c[0] if single else g_c
        return out


def init_denoiser(arch: DenoiserArch, rng: RngState) -> DenoiserModel:
    """Gaussian init with 1/sqrt(fan_in) scaling; biases start at zero."""
    params = np.zeros(arch.n_params)
    model = DenoiserModel(arch, params)
    prev = arch.lifted_dim
    for l, w in enumerate(arch.widths):
        model.slice(f"h{l}.w")[:] = rng.normal((w, prev)) / math.sqrt(prev)
        model.slice(f"h{l}.u")[:] = rng.normal((w, arch.time_dim)) / math.sqrt(arch.time_dim)
        model.slice(f"h{l}.v")[:] = rng.normal((w, arch.cond_dim)) / math.sqrt(arch.cond_dim)
        prev = w
    model.slice("out.w")[:] = rng.normal((arch.input_dim, prev)) / math.sqrt(prev)
    return model
