"""Identity-level privacy cloaks against personalized diffusion, desk scale.

The package is a end-to-end miniature of the setting: a conditional
denoiser trained on a synthetic image corpus, per-identity personalization
of (weights, prompt embedding), a universal additive cloak optimized over
an identity's condition subspace, fine-tuning attacks of varying capacity,
and proxy metrics that score how well generations match the identity.
"""

from .attack import ATTACK_METHODS, AttackConfig, generate_batch, personalize_attack
from .baselines import (
    BaselineConfig,
    gradient_avg_cloak,
    image_specific_cloaks,
    transfer_assignment,
)
from .cloak import (
    Cloak,
    CloakOptConfig,
    apply_cloak_image,
    apply_cloak_latent,
    cloak_objective,
    optimize_cloak,
    pgd_step,
)
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_keys,
    config_to_text,
    load_config,
    parse_overrides,
    smoke_config,
    validate_config,
)
from .data import (
    DEFAULT_IMAGE_SHAPE,
    PIXEL_RANGE,
    IdentityDataset,
    import_dataset,
    render_image,
    save_dataset,
    stack_corpus,
    synth_dataset,
)
from .diffusion import (
    ddim_step,
    ddim_timegrid,
    denoise_loss,
    denoise_loss_at,
    forward_diffuse,
    predict_x0,
    sample_latent,
    sample_latent_batch,
    train_denoiser,
)
from .embedder import (
    EmbedderConfig,
    IdentityEmbedder,
    init_embedder,
    separation_score,
    train_identity_embedder,
)
from .errors import ConfigError, DataError, NumericError
from .experiment import (
    DEFENSES,
    ArmRecord,
    ArmResult,
    ExperimentContext,
    SplitOutcome,
    base_corpus_pairs,
    craft_defense,
    run_arm_grid,
    run_protection_experiment,
    with_attacker,
)
from .identity import (
    AnchorSet,
    IdentitySubspace,
    core_identity,
    diversify_contexts,
    estimate_subspace,
    learn_identity,
    sample_condition,
)
from .metrics import MetricsReport, evaluate_protection, frechet_distance, ism_score
from .model import DenoiserArch, DenoiserModel, init_denoiser
from .optim import Adam, Sgd, make_optimizer
from .pipeline import World, build_world, run_pipeline, train_base_model
from .report import emit_report, read_metrics_csv, summarize_rows, write_metrics_csv
from .rng import RngState
from .schedule import NoiseSchedule, make_schedule
from .textenc import (
    DEFAULT_TEMPLATES,
    ID_TOKEN,
    PromptTemplate,
    TextEncoderStub,
    Vocabulary,
    init_encoder,
)

__version__ = "0.1.0"

__all__ = [
    "ATTACK_METHODS",
    "Adam",
    "AnchorSet",
    "ArmRecord",
    "ArmResult",
    "AttackConfig",
    "BaselineConfig",
    "Cloak",
    "CloakOptConfig",
    "ConfigError",
    "DEFAULT_IMAGE_SHAPE",
    "DEFAULT_TEMPLATES",
    "DEFENSES",
    "DataError",
    "DenoiserArch",
    "DenoiserModel",
    "EmbedderConfig",
    "ExperimentConfig",
    "ExperimentContext",
    "ID_TOKEN",
    "IdentityDataset",
    "IdentityEmbedder",
    "IdentitySubspace",
    "MetricsReport",
    "NoiseSchedule",
    "NumericError",
    "PIXEL_RANGE",
    "PromptTemplate",
    "RngState",
    "Sgd",
    "SplitOutcome",
    "TextEncoderStub",
    "Vocabulary",
    "World",
    "apply_cloak_image",
    "apply_cloak_latent",
    "apply_overrides",
    "base_corpus_pairs",
    "build_world",
    "cloak_objective",
    "config_keys",
    "config_to_text",
    "core_identity",
    "craft_defense",
    "ddim_step",
    "ddim_timegrid",
    "denoise_loss",
    "denoise_loss_at",
    "diversify_contexts",
    "emit_report",
    "estimate_subspace",
    "evaluate_protection",
    "forward_diffuse",
    "frechet_distance",
    "generate_batch",
    "gradient_avg_cloak",
    "image_specific_cloaks",
    "import_dataset",
    "init_denoiser",
    "init_embedder",
    "init_encoder",
    "ism_score",
    "learn_identity",
    "load_config",
    "make_optimizer",
    "make_schedule",
    "optimize_cloak",
    "parse_overrides",
    "personalize_attack",
    "pgd_step",
    "predict_x0",
    "read_metrics_csv",
    "render_image",
    "run_arm_grid",
    "run_pipeline",
    "run_protection_experiment",
    "sample_condition",
    "sample_latent",
    "sample_latent_batch",
    "save_dataset",
    "separation_score",
    "smoke_config",
    "stack_corpus",
    "summarize_rows",
    "synth_dataset",
    "train_base_model",
    "train_denoiser",
    "train_identity_embedder",
    "validate_config",
    "with_attacker",
    "write_metrics_csv",
]
