"""Self-trained identity embedder backing the proxy metrics.

A small classifier maps an image to a unit-norm feature vector; identity
similarity is measured as cosine between features, and per-identity softmax
confidence doubles as a detection-style score.  Training is plain
cross-entropy over identity labels with a cosine head (normalized features
against learned per-identity prototypes), which pushes same-identity
features together and different identities apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import hashlib

import numpy as np

from .errors import NumericError
from .optim import make_optimizer
from .rng import RngState


@dataclass(frozen=True)
class EmbedderConfig:
    """Architecture and training knobs for :func:`train_identity_embedder`."""

    hidden: int = 64
    feat_dim: int = 16
    scale: float = 10.0
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 32
    holdout_per_identity: int = 2
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.feat_dim < 1:
            raise ValueError("hidden and feat_dim must be >= 1")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be nonnegative")
        if self.holdout_per_identity < 1:
            raise ValueError("holdout_per_identity must be >= 1")


class IdentityEmbedder:
    """Feature extractor plus identity classifier over a fixed label set.

    Parameter layout (flat vector): w1 (hidden, input), b1 (hidden),
    w2 (feat, hidden), b2 (feat), proto (classes, feat).
    """

    def __init__(self, input_dim: int, hidden: int, feat_dim: int, n_classes: int,
                 params: np.ndarray, scale: float = 10.0,
                 metadata: dict[str, float] | None = None):
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.feat_dim = int(feat_dim)
        self.n_classes = int(n_classes)
        self.scale = float(scale)
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (self.n_params(),):
            raise ValueError(
                f"params must have shape ({self.n_params()},), got {self.params.shape}"
            )
        self.metadata = dict(metadata or {})

    def n_params(self) -> int:
        h, f, k, d = self.hidden, self.feat_dim, self.n_classes, self.input_dim
        return h * d + h + f * h + f + k * f

    def _slices(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        h, f, k, d = self.hidden, self.feat_dim, self.n_classes, self.input_dim
        table: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in (
            ("w1", (h, d)), ("b1", (h,)), ("w2", (f, h)), ("b2", (f,)), ("proto", (k, f)),
        ):
            table[name] = (off, shape)
            off += int(np.prod(shape))
        return table

    def slice(self, name: str) -> np.ndarray:
        off, shape = self._slices()[name]
        return self.params[off : off + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "IdentityEmbedder":
        return IdentityEmbedder(
            self.input_dim, self.hidden, self.feat_dim, self.n_classes,
            self.params.copy(), self.scale, dict(self.metadata),
        )

    def params_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(
            f"embedder:{self.input_dim}:{self.hidden}:{self.feat_dim}:"
            f"{self.n_classes}:{self.scale}".encode()
        )
        digest.update(self.params.tobytes())
        return digest.hexdigest()[:16]

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"input dim {xb.shape[1]}, embedder expects {self.input_dim}")
        h = np.tanh(xb @ self.slice("w1").T + self.slice("b1"))
        u = h @ self.slice("w2").T + self.slice("b2")
        norms = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
        f = u / norms
        cache = {"x": xb, "h": h, "u": u, "norms": norms, "f": f, "single": single}
        return f, cache

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm identity features; accepts one image or a batch."""

        f, cache = self._forward(x)
        return f[0] if cache["single"] else f

    def logits(self, x: np.ndarray) -> np.ndarray:
        f, cache = self._forward(x)
        out = self.scale * (f @ self.slice("proto").T)
        return out[0] if cache["single"] else out

    def confidence(self, x: np.ndarray) -> np.ndarray:
        """Max softmax probability over identities, per input row."""

        z = self.logits(x)
        zb = z[None, :] if z.ndim == 1 else z
        zb = zb - zb.max(axis=1, keepdims=True)
        p = np.exp(zb)
        p /= p.sum(axis=1, keepdims=True)
        out = p.max(axis=1)
        return float(out[0]) if z.ndim == 1 else out


def init_embedder(input_dim: int, n_classes: int, cfg: EmbedderConfig, rng: RngState) -> IdentityEmbedder:
    """Gaussian init with 1/sqrt(fan_in) scaling; biases at zero."""

    emb = IdentityEmbedder(
        input_dim, cfg.hidden, cfg.feat_dim, n_classes,
        np.zeros(
            cfg.hidden * input_dim + cfg.hidden
            + cfg.feat_dim * cfg.hidden + cfg.feat_dim
            + n_classes * cfg.feat_dim
        ),
        cfg.scale,
    )
    for name, fan_in in (("w1", input_dim), ("w2", cfg.hidden), ("proto", cfg.feat_dim)):
        view = emb.slice(name)
        view[...] = rng.normal(view.shape) / np.sqrt(fan_in)
    return emb


def separation_score(features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean same-identity cosine, mean cross-identity cosine) over all pairs."""

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    gram = features @ features.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    same_mask = same & off_diag
    cross_mask = ~same
    if not same_mask.any() or not cross_mask.any():
        raise ValueError("need both same-identity and cross-identity pairs")
    return float(gram[same_mask].mean()), float(gram[cross_mask].mean())


def _loss_and_grad(
    emb: IdentityEmbedder, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its parameter gradient."""

    f, cache = emb._forward(x)
    proto = emb.slice("proto")
    logits = emb.scale * (f @ proto.T)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    n = x.shape[0]
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))

    d_logits = p.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    g = np.zeros_like(emb.params)

    def stash(name: str, value: np.ndarray) -> None:
        off, shape = emb._slices()[name]
        g[off : off + int(np.prod(shape))] = value.ravel()

    stash("proto", emb.scale * (d_logits.T @ f))
    d_f = emb.scale * (d_logits @ proto)
    # unit-normalization backprop: du = (df - f * <f, df>) / ||u||
    inner = np.sum(cache["f"] * d_f, axis=1, keepdims=True)
    d_u = (d_f - cache["f"] * inner) / cache["norms"]
    stash("w2", d_u.T @ cache["h"])
    stash("b2", d_u.sum(axis=0))
    d_h = d_u @ emb.slice("w2")
    d_z = d_h * (1.0 - cache["h"] ** 2)
    stash("w1", d_z.T @ cache["x"])
    stash("b1", d_z.sum(axis=0))
    return loss, g


def train_identity_embedder(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: EmbedderConfig,
    rng: RngState,
) -> IdentityEmbedder:
    """Train the embedder on labeled images from at least two identities.

    A fixed number of images per identity is held out; the metadata records
    held-out same/cross cosine separation before and after training.
    """

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 2 or images.shape[0] != labels.shape[0]:
        raise ValueError("images must be (n, dim) aligned with labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two identities")
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ValueError("labels must be 0..K-1")

    train_idx: list[int] = []
    held_idx: list[int] = []
    for k in classes:
        members = np.flatnonzero(labels == k)
        order = members[rng.permutation(len(members))]
        n_held = min(cfg.holdout_per_identity, max(len(order) - 1, 0))
        held_idx.extend(order[:n_held].tolist())
        train_idx.extend(order[n_held:].tolist())
    if not train_idx or not held_idx:
        raise ValueError("not enough images per identity for a held-out split")
    x_train, y_train = images[train_idx], labels[train_idx]
    x_held, y_held = images[held_idx], labels[held_idx]

    emb = init_embedder(images.shape[1], len(classes), cfg, rng)
    same0, cross0 = separation_score(emb.embed(x_held), y_held)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    for _ in range(cfg.steps):
        idx = np.array([rng.choice(len(x_train)) for _ in range(cfg.batch_size)])
        loss, g = _loss_and_grad(emb, x_train[idx], y_train[idx])
        if not np.isfinite(loss):
            raise NumericError("embedder training diverged to a non-finite loss")
        opt.step(emb.params, g)
    same1, cross1 = separation_score(emb.embed(x_held), y_held)
    emb.metadata.update(
        {
            "holdout_same_cos_untrained": same0,
            "holdout_cross_cos_untrained": cross0,
            "holdout_same_cos": same1,
            "holdout_cross_cos": cross1,
            "train_images": float(len(x_train)),
            "holdout_images": float(len(x_held)),
        }
    )
    return emb
