"""Synthetic identity datasets and the tensor-file import path.

Each synthetic identity is a procedural texture generator: wave, stripe and
blob components whose parameters are fixed per identity, rendered under
per-image context variation (translation, rotation, illumination).  Identity
parameters are what the embedder and the attack must latch onto; context
parameters play the role of pose and lighting.  Ground-truth labels
therefore exist by construction.

Images are flat float64 vectors in [0, 1]; ``image_shape`` records the 2-D
layout for rendering and report plots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import RngState
from . import tns

PIXEL_RANGE = (0.0, 1.0)
DEFAULT_IMAGE_SHAPE = (16, 16)


@dataclass(frozen=True)
class IdentityParams:
    """Per-identity pattern genome; fixed across all images of the person."""

    wave_fx: float
    wave_fy: float
    phase_x: float
    phase_y: float
    stripe_angle: float
    stripe_freq: float
    blob_cx: float
    blob_cy: float
    blob_r: float
    blob_sign: float
    w_wave: float
    w_stripe: float
    w_blob: float


@dataclass(frozen=True)
class ContextParams:
    """Per-image nuisance parameters; spread scales all of them."""

    dx: float
    dy: float
    rot: float
    gain: float
    bias: float


def draw_identity_params(rng: RngState) -> IdentityParams:
    weights = rng.uniform(0.4, 1.0, 3)
    weights = weights * (1.6 / weights.sum())
    return IdentityParams(
        wave_fx=float(rng.uniform(0.5, 3.0)),
        wave_fy=float(rng.uniform(0.5, 3.0)),
        phase_x=float(rng.uniform(0.0, 1.0)),
        phase_y=float(rng.uniform(0.0, 1.0)),
        stripe_angle=float(rng.uniform(0.0, np.pi)),
        stripe_freq=float(rng.uniform(1.0, 4.0)),
        blob_cx=float(rng.uniform(0.25, 0.75)),
        blob_cy=float(rng.uniform(0.25, 0.75)),
        blob_r=float(rng.uniform(0.12, 0.3)),
        blob_sign=1.0 if rng.randint(0, 1) == 1 else -1.0,
        w_wave=float(weights[0]),
        w_stripe=float(weights[1]),
        w_blob=float(weights[2]),
    )


def draw_context_params(rng: RngState, spread: float) -> ContextParams:
    if spread < 0.0:
        raise ValueError("context spread must be >= 0")
    return ContextParams(
        dx=spread * float(rng.uniform(-0.12, 0.12)),
        dy=spread * float(rng.uniform(-0.12, 0.12)),
        rot=spread * float(rng.uniform(-0.25, 0.25)),
        gain=1.0 + spread * float(rng.uniform(-0.25, 0.25)),
        bias=spread * float(rng.uniform(-0.08, 0.08)),
    )


def render_image(
    identity: IdentityParams,
    context: ContextParams,
    image_shape: tuple[int, int] = DEFAULT_IMAGE_SHAPE,
) -> np.ndarray:
    """Render one flat image in [0, 1] from identity and context parameters."""

    h, w = image_shape
    vv, uu = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    cos_r, sin_r = np.cos(context.rot), np.sin(context.rot)
    du, dv = uu - 0.5, vv - 0.5
    u = cos_r * du - sin_r * dv + 0.5 + context.dx
    v = sin_r * du + cos_r * dv + 0.5 + context.dy

    wave = np.sin(2.0 * np.pi * (identity.wave_fx * u + identity.phase_x)) * np.sin(
        2.0 * np.pi * (identity.wave_fy * v + identity.phase_y)
    )
    stripe_coord = np.cos(identity.stripe_angle) * u + np.sin(identity.stripe_angle) * v
    stripe = np.sin(2.0 * np.pi * identity.stripe_freq * stripe_coord)
    blob = identity.blob_sign * np.exp(
        -((u - identity.blob_cx) ** 2 + (v - identity.blob_cy) ** 2)
        / (2.0 * identity.blob_r**2)
    )
    pattern = identity.w_wave * wave + identity.w_stripe * stripe + identity.w_blob * blob
    img = 0.5 + 0.28 * context.gain * pattern + context.bias
    return np.clip(img, PIXEL_RANGE[0], PIXEL_RANGE[1]).reshape(-1)


@dataclass
class IdentityDataset:
    """A person's images, split into publishable train and held-out test."""

    identity_id: str
    train: np.ndarray  # (n_train, h*w)
    test: np.ndarray  # (n_test, h*w)
    image_shape: tuple[int, int]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.train = np.asarray(self.train, dtype=np.float64)
        self.test = np.asarray(self.test, dtype=np.float64)
        dim = int(np.prod(self.image_shape))
        for name, arr in (("train", self.train), ("test", self.test)):
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DataError(f"{name} split must be a nonempty (n, dim) array")
            if arr.shape[1] != dim:
                raise DataError(
                    f"{name} images have dim {arr.shape[1]}, image_shape implies {dim}"
                )
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} split contains non-finite values")

    @property
    def dim(self) -> int:
        return int(np.prod(self.image_shape))

    def train_list(self) -> list[np.ndarray]:
        return [row.copy() for row in self.train]

    def test_list(self) -> list[np.ndarray]:
        return [row.copy() for row in self.test]


def synth_dataset(
    identity_seed: int,
    n_train: int = 4,
    n_test: int = 8,
    context_spread: float = 1.0,
    image_shape: tuple[int, int] = DEFAULT_IMAGE_SHAPE,
) -> IdentityDataset:
    """Procedural dataset for one identity; deterministic in all arguments.

    Image index j always maps to the same context draw, so regenerating with
    larger counts extends the set without changing earlier images.
    """

    if n_train < 1 or n_test < 1:
        raise ValueError("need n_train >= 1 and n_test >= 1")
    root = RngState(identity_seed)
    identity = draw_identity_params(root.derive("identity"))
    images = [
        render_image(identity, draw_context_params(root.derive("context", j), context_spread), image_shape)
        for j in range(n_train + n_test)
    ]
    return IdentityDataset(
        identity_id=f"synth{identity_seed}",
        train=np.stack(images[:n_train]),
        test=np.stack(images[n_train:]),
        image_shape=image_shape,
        meta={
            "source": "synth",
            "identity_seed": str(identity_seed),
            "context_spread": repr(context_spread),
        },
    )


def stack_corpus(datasets: list[IdentityDataset]) -> tuple[np.ndarray, np.ndarray]:
    """All images of all identities as (images, integer labels)."""

    if not datasets:
        raise ValueError("need at least one dataset")
    if len({ds.image_shape for ds in datasets}) != 1:
        raise DataError("corpus datasets must share one image shape")
    images, labels = [], []
    for k, ds in enumerate(datasets):
        for arr in (ds.train, ds.test):
            images.append(arr)
            labels.append(np.full(arr.shape[0], k, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def save_dataset(directory: str | Path, dataset: IdentityDataset) -> Path:
    """Write one tensor file per image plus a manifest; returns manifest path."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"identity_id={dataset.identity_id}",
        f"image_shape={dataset.image_shape[0]}x{dataset.image_shape[1]}",
    ]
    for split in ("train", "test"):
        for j, row in enumerate(getattr(dataset, split)):
            name = f"{split}_{j:03d}.tns"
            tns.write_tensor(directory / name, row.reshape(dataset.image_shape))
            lines.append(f"{split}={name}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def import_dataset(manifest_path: str | Path) -> IdentityDataset:
    """Load a dataset from a manifest listing per-split tensor files.

    Manifest lines: ``identity_id=...`` (optional), ``image_shape=HxW``
    (required for rank-1 tensors), and repeatable ``train=<path>`` /
    ``test=<path>`` entries with paths relative to the manifest.
    """

    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: no such manifest")
    identity_id = manifest_path.parent.name or "imported"
    image_shape: tuple[int, int] | None = None
    files: dict[str, list[Path]] = {"train": [], "test": []}
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError(f"{manifest_path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key == "identity_id":
            identity_id = value
        elif key == "image_shape":
            try:
                h, w = (int(part) for part in value.split("x"))
                image_shape = (h, w)
            except ValueError as exc:
                raise DataError(f"{manifest_path}:{lineno}: bad image_shape {value!r}") from exc
        elif key in files:
            files[key].append(manifest_path.parent / value)
        else:
            raise DataError(f"{manifest_path}:{lineno}: unknown key {key!r}")
    if not files["train"] or not files["test"]:
        raise DataError(f"{manifest_path}: need at least one train and one test entry")

    overlap = {p.resolve() for p in files["train"]} & {p.resolve() for p in files["test"]}
    if overlap:
        names = ", ".join(sorted(str(p) for p in overlap))
        raise DataError(f"{manifest_path}: files listed in both splits: {names}")

    splits: dict[str, np.ndarray] = {}
    shape_seen: tuple[int, ...] | None = None
    for split, paths in files.items():
        rows = []
        for p in paths:
            arr = tns.read_tensor(p)
            if arr.ndim not in (1, 2):
                raise DataError(f"{p}: image tensors must be rank 1 or 2, got rank {arr.ndim}")
            if shape_seen is None:
                shape_seen = arr.shape
            elif arr.shape != shape_seen:
                raise DataError(f"{p}: shape {arr.shape} differs from first image {shape_seen}")
            rows.append(arr.reshape(-1))
        splits[split] = np.stack(rows)

    if len(shape_seen) == 2:
        inferred = (int(shape_seen[0]), int(shape_seen[1]))
        if image_shape is not None and image_shape != inferred:
            raise DataError(
                f"{manifest_path}: image_shape {image_shape} contradicts tensors {inferred}"
            )
        image_shape = inferred
    if image_shape is None:
        raise DataError(f"{manifest_path}: rank-1 tensors need an image_shape entry")
    if int(np.prod(image_shape)) != splits["train"].shape[1]:
        raise DataError(
            f"{manifest_path}: image_shape {image_shape} does not match tensor size"
        )
    return IdentityDataset(
        identity_id=identity_id,
        train=splits["train"],
        test=splits["test"],
        image_shape=image_shape,
        meta={"source": "import", "manifest": str(manifest_path)},
    )
