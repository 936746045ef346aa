"""Experiment orchestration: build everything, run the grid, persist it all.

An experiment directory is self-describing and regenerable:

    config.txt                      canonical key=value config
    datasets/<identity>/            clean input images + manifest
    base/                           base model, encoder, embedder checkpoints
    arms/<identity>_s<seed>_<defense>/   per-arm artifacts
    reports/metrics.csv             primary results table
    reports/summary.csv, ablation.csv, *.svg
    manifest.txt                    layout version, status, file hashes

A stage failure still writes manifest.txt with the failing stage name, so
partial artifacts stay inspectable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tns
from .config import ExperimentConfig, config_to_text, validate_config
from .data import (
    PIXEL_RANGE,
    IdentityDataset,
    save_dataset,
    stack_corpus,
    synth_dataset,
)
from .embedder import IdentityEmbedder, train_identity_embedder
from .errors import ConfigError
from .experiment import (
    ArmRecord,
    ExperimentContext,
    base_corpus_pairs,
    run_arm_grid,
    with_attacker,
)
from .diffusion import train_denoiser
from .model import DenoiserArch, DenoiserModel, init_denoiser
from .report import emit_report, write_metrics_csv
from .rng import RngState
from .schedule import NoiseSchedule, make_schedule
from .textenc import (
    DEFAULT_TEMPLATES,
    PromptTemplate,
    TextEncoderStub,
    Vocabulary,
    init_encoder,
)

LAYOUT_VERSION = 1


@dataclass
class World:
    """All trained shared components of one experiment."""

    cfg: ExperimentConfig
    sched: NoiseSchedule
    vocab: Vocabulary
    prompts: tuple[PromptTemplate, ...]
    datasets: list[IdentityDataset]
    base_model: DenoiserModel
    base_encoder: TextEncoderStub
    embedder: IdentityEmbedder
    attacker_model: DenoiserModel | None = None
    attacker_encoder: TextEncoderStub | None = None

    def context(self) -> ExperimentContext:
        cfg = self.cfg
        return ExperimentContext(
            sched=self.sched,
            base_model=self.base_model,
            base_encoder=self.base_encoder,
            embedder=self.embedder,
            prompts=self.prompts,
            identity_steps=cfg.identity_steps,
            identity_lr=cfg.identity_lr,
            anchor_steps=cfg.anchor_steps,
            anchor_lr=cfg.anchor_lr,
            cloak_cfg=cfg.cloak_config(),
            baseline_cfg=cfg.baseline_config(),
            attack_cfg=cfg.attack_config(),
            n_generate=cfg.n_generate,
            gen_steps=cfg.gen_steps,
            threshold=cfg.threshold,
            clamp=PIXEL_RANGE,
        )

    def transfer_context(self) -> ExperimentContext:
        if self.attacker_model is None or self.attacker_encoder is None:
            raise ConfigError("transfer experiment requested but no attacker base was built")
        return with_attacker(self.context(), self.attacker_model, self.attacker_encoder)


def protected_datasets(cfg: ExperimentConfig) -> list[IdentityDataset]:
    return [
        synth_dataset(
            cfg.identity_seed_base + i, cfg.n_train, cfg.n_test,
            cfg.context_spread, cfg.image_shape,
        )
        for i in range(cfg.n_identities)
    ]


def filler_datasets(cfg: ExperimentConfig) -> list[IdentityDataset]:
    return [
        synth_dataset(
            cfg.filler_seed_base + i, max(cfg.filler_images - 1, 1), 1,
            cfg.context_spread, cfg.image_shape,
        )
        for i in range(cfg.n_filler_identities)
    ]


def train_base_model(
    cfg: ExperimentConfig,
    sched: NoiseSchedule,
    rng: RngState,
    widths: tuple[int, ...] | None = None,
) -> DenoiserModel:
    """Train one base denoiser on the filler-identity corpus."""

    arch = DenoiserArch(
        input_dim=int(np.prod(cfg.image_shape)),
        cond_dim=cfg.cond_dim,
        time_dim=cfg.time_dim,
        widths=widths if widths is not None else cfg.widths,
        feat_dim=cfg.feat_dim,
        feat_scale=cfg.feat_scale,
        feat_seed=cfg.seed,
    )
    pairs = base_corpus_pairs(filler_datasets(cfg), cfg.cond_dim, rng.derive("conds"))
    model = init_denoiser(arch, rng.derive("init"))
    return train_denoiser(
        pairs, model, cfg.base_steps, cfg.base_lr, rng.derive("train"), sched,
        optimizer=cfg.base_optimizer, batch_size=cfg.base_batch,
    )


def train_metric_embedder(cfg: ExperimentConfig, rng: RngState) -> IdentityEmbedder:
    """Train the proxy-metric embedder on an extended render of each identity."""

    corpus = [
        synth_dataset(
            cfg.identity_seed_base + i, cfg.embed_images - cfg.n_test, cfg.n_test,
            cfg.context_spread, cfg.image_shape,
        )
        for i in range(cfg.n_identities)
    ]
    images, labels = stack_corpus(corpus)
    return train_identity_embedder(images, labels, cfg.embedder_config(), rng)


def build_world(cfg: ExperimentConfig) -> World:
    """Construct every shared component deterministically from cfg.seed."""

    validate_config(cfg)
    root = RngState(cfg.seed)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    vocab = Vocabulary.from_templates()
    prompts = tuple(PromptTemplate.parse(text, vocab) for text in DEFAULT_TEMPLATES)
    world = World(
        cfg=cfg,
        sched=sched,
        vocab=vocab,
        prompts=prompts,
        datasets=protected_datasets(cfg),
        base_model=train_base_model(cfg, sched, root.derive("base")),
        base_encoder=init_encoder(vocab, cfg.cond_dim, root.derive("encoder-init")),
        embedder=train_metric_embedder(cfg, root.derive("embedder")),
    )
    if cfg.transfer_enabled:
        world.attacker_model = train_base_model(
            cfg, sched, root.derive("base-b"), widths=cfg.attacker_widths
        )
        world.attacker_encoder = init_encoder(vocab, cfg.cond_dim, root.derive("encoder-b-init"))
    return world


def _arm_sink(arm_dir: Path, vocab: Vocabulary):
    arm_dir.mkdir(parents=True, exist_ok=True)

    def sink(name: str, obj: object) -> None:
        path = arm_dir / f"{name}.tns"
        if name.startswith(("personalized_model", "attack_model")):
            tns.save_denoiser(path, obj)
        elif name.startswith(("personalized_encoder", "attack_encoder")):
            tns.save_encoder(path, obj, vocab)
        elif name == "anchors":
            tns.save_anchors(path, obj)
        elif name == "subspace":
            tns.save_subspace(path, obj)
        elif name.startswith("generations"):
            tns.write_tensor(path, np.asarray(obj))
        else:
            tns.write_tensor(path, np.asarray(obj))

    return sink


def _persist_arm_results(arms_root: Path, records: list[ArmRecord]) -> None:
    for record in records:
        arm_dir = arms_root / f"{record.identity_id}_s{record.seed}_{record.defense}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        result = record.result
        if result.published_train is not None:
            tns.write_tensor(arm_dir / "published_train.tns", result.published_train)
        if result.published_test is not None:
            tns.write_tensor(arm_dir / "published_test.tns", result.published_test)
        if result.cloak is not None:
            tns.save_cloak(arm_dir / "cloak.tns", result.cloak)
        if result.per_image_cloaks:
            for j, cloak in enumerate(result.per_image_cloaks):
                tns.save_cloak(arm_dir / f"cloak_{j:03d}.tns", cloak)


def _write_manifest(out: Path, status: dict[str, object]) -> None:
    entries = dict(status)
    for path in sorted(out.rglob("*")):
        if path.is_dir() or path.name == "manifest.txt":
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        entries[f"file.{path.relative_to(out).as_posix()}"] = digest
    tns.write_sidecar(out / "manifest.txt", entries)


def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Run the whole experiment into cfg.out_dir; returns the directory.

    Refuses to reuse a nonempty directory unless ``force`` is set.  On a
    stage failure the manifest records the stage name before the error
    propagates, and completed artifacts stay on disk.
    """

    validate_config(cfg)
    out = Path(cfg.out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(
            f"{out} already contains artifacts; pass force=True (--force) to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    status: dict[str, object] = {
        "layout_version": LAYOUT_VERSION,
        "status": "running",
        "stage": "",
        "seed": cfg.seed,
    }
    stage = "config"
    try:
        (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")

        stage = "world"
        world = build_world(cfg)
        for ds in world.datasets:
            save_dataset(out / "datasets" / ds.identity_id, ds)
        base_dir = out / "base"
        base_dir.mkdir(parents=True, exist_ok=True)
        tns.save_denoiser(base_dir / "denoiser.tns", world.base_model)
        tns.save_encoder(base_dir / "encoder.tns", world.base_encoder, world.vocab)
        tns.save_embedder(base_dir / "embedder.tns", world.embedder)
        if world.attacker_model is not None:
            tns.save_denoiser(base_dir / "attacker_denoiser.tns", world.attacker_model)
            tns.save_encoder(
                base_dir / "attacker_encoder.tns", world.attacker_encoder, world.vocab
            )

        stage = "arms"
        arms_root = out / "arms"
        ctx = world.context()
        records = run_arm_grid(
            world.datasets,
            ctx,
            defenses=cfg.grid_defenses,
            seeds=cfg.grid_seeds,
            master_seed=cfg.seed,
            include_train_report=cfg.include_train_report,
            sink_for=lambda ident, seed, defense: _arm_sink(
                arms_root / f"{ident}_s{seed}_{defense}", world.vocab
            ),
        )
        _persist_arm_results(arms_root, records)
        write_metrics_csv(records, out / "reports" / "metrics.csv")

        if cfg.transfer_enabled:
            stage = "transfer"
            transfer_records = run_arm_grid(
                world.datasets,
                world.transfer_context(),
                defenses=("none", "id_cloak"),
                seeds=cfg.grid_seeds,
                master_seed=cfg.seed,
                include_train_report=False,
            )
            write_metrics_csv(transfer_records, out / "reports" / "transfer_metrics.csv")

        stage = "reports"
        emit_report(out)

        stage = "manifest"
        status.update(status="complete", stage="done")
        _write_manifest(out, status)
    except Exception as exc:
        status.update(status="failed", stage=stage, error=f"{type(exc).__name__}: {exc}")
        try:
            _write_manifest(out, status)
        except OSError:
            pass
        raise
    return out
