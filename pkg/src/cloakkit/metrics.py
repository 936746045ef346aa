"""Protection metrics computed from the self-trained identity embedder.

Three proxies, reported together:

* ``ism_proxy``: mean over generated images of the max cosine similarity
  between its feature and any reference feature.  High means the attacker
  reproduced the identity; protection aims to push it down.
* ``fdfr_proxy``: fraction of generated images whose best identity-classifier
  confidence falls below a threshold, i.e. the rate at which generations no
  longer register as any known identity.  Protection pushes it up.
* ``quality_proxy``: Frechet distance between Gaussian fits of the embedder
  features of generated vs. reference images.  Protection pushes it up
  (generations drift away from the reference distribution).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .embedder import IdentityEmbedder
from .errors import NumericError


@dataclass
class MetricsReport:
    """One evaluation outcome plus enough provenance to reproduce it."""

    ism_proxy: float
    fdfr_proxy: float
    quality_proxy: float
    n_generated: int
    threshold: float
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not -1.0 - 1e-9 <= self.ism_proxy <= 1.0 + 1e-9:
            raise ValueError(f"ism_proxy out of [-1, 1]: {self.ism_proxy}")
        if not 0.0 <= self.fdfr_proxy <= 1.0:
            raise ValueError(f"fdfr_proxy out of [0, 1]: {self.fdfr_proxy}")
        if self.quality_proxy < 0.0:
            raise ValueError(f"quality_proxy must be >= 0: {self.quality_proxy}")


def _as_matrix(images: list[np.ndarray] | np.ndarray, what: str) -> np.ndarray:
    arr = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images]) \
        if isinstance(images, (list, tuple)) else np.asarray(images, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{what} must be a nonempty batch of flat images")
    return arr


def ism_score(gen_feats: np.ndarray, ref_feats: np.ndarray) -> float:
    """Mean over rows of gen_feats of the max cosine against ref_feats rows."""

    sims = gen_feats @ ref_feats.T
    return float(sims.max(axis=1).mean())


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature batches.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).  Single-sample
    batches get a zero covariance.  Tiny negative results from matrix
    square-root roundoff are clamped to zero.
    """

    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature batches must be 2-D with matching width")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim) if len(a) > 1 else np.zeros((dim, dim))
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim) if len(b) > 1 else np.zeros((dim, dim))
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    if not np.all(np.isfinite(covmean)):
        # retry on the jittered product; singular PSD products can trip sqrtm
        jitter = 1e-10 * np.eye(dim)
        covmean = scipy.linalg.sqrtm((cov_a + jitter) @ (cov_b + jitter))
        if np.iscomplexobj(covmean):
            covmean = covmean.real
        if not np.all(np.isfinite(covmean)):
            raise NumericError("matrix square root failed in frechet_distance")
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))
    if value < -1e-6:
        raise NumericError(f"frechet_distance collapsed to {value}")
    return max(value, 0.0)


def evaluate_protection(
    generated: list[np.ndarray] | np.ndarray,
    reference: list[np.ndarray] | np.ndarray,
    embedder: IdentityEmbedder,
    threshold: float = 0.5,
    meta: dict[str, str] | None = None,
) -> MetricsReport:
    """Score generated images against held-out reference images."""

    gen = _as_matrix(generated, "generated")
    ref = _as_matrix(reference, "reference")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    gen_feats = embedder.embed(gen)
    ref_feats = embedder.embed(ref)
    conf = np.atleast_1d(embedder.confidence(gen))
    report_meta = {"embedder_hash": embedder.params_hash()}
    report_meta.update(meta or {})
    return MetricsReport(
        ism_proxy=ism_score(gen_feats, ref_feats),
        fdfr_proxy=float(np.mean(conf < threshold)),
        quality_proxy=frechet_distance(gen_feats, ref_feats),
        n_generated=int(gen.shape[0]),
        threshold=float(threshold),
        meta=report_meta,
    )
