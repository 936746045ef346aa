"""Experiment configuration: typed schema over line-oriented key=value files.

Every knob has a dotted key (section.name) and a default.  Where the
method's reference protocol states a value, the default equals it: budget
eta=16/255 shared by every defense, step size alpha=0.05, 200 outer x 10
inner cloak iterations, 50-step deterministic sampling, 1000 identity-
binding steps, 50 anchor-tuning steps at lr 1e-3, 1000 attack fine-tuning
steps, 4 train / 8 test images, 30 generations over 3 prompts.  Remaining
values (network widths, toy learning rates, embedder knobs) are artifacts
of the desk-scale setup.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .attack import AttackConfig
from .baselines import BaselineConfig
from .cloak import CloakOptConfig
from .embedder import EmbedderConfig
from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, fully-defaulted experiment schema; see module docstring."""

    seed: int = 0
    out_dir: str = "runs/exp"

    schedule_t: int = 1000
    schedule_kind: str = "linear"

    image_h: int = 16
    image_w: int = 16
    n_train: int = 4
    n_test: int = 8
    context_spread: float = 1.0
    n_identities: int = 5
    identity_seed_base: int = 1000
    n_filler_identities: int = 8
    filler_seed_base: int = 5000
    filler_images: int = 24
    embed_images: int = 48

    cond_dim: int = 32
    time_dim: int = 16
    widths: tuple[int, ...] = (128, 128)
    feat_dim: int = 128
    feat_scale: float = 6.0

    base_steps: int = 4000
    base_lr: float = 1e-3
    base_batch: int = 16
    base_optimizer: str = "adam"

    identity_steps: int = 1000
    identity_lr: float = 1e-4
    anchor_steps: int = 50
    anchor_lr: float = 1e-3

    cloak_eta: float = 16.0 / 255.0
    cloak_alpha: float = 0.05
    cloak_n_outer: int = 200
    cloak_m_inner: int = 10
    cloak_sampler_steps: int = 50
    cloak_t_min: int = 1
    cloak_t_max: int = 0  # 0 means "up to the schedule end"
    cloak_pre_search: bool = True
    cloak_scale_by_signal: bool = True
    cloak_truncation: float = 3.0

    baseline_steps: int = 200
    baseline_alpha: float = 0.05

    attack_method: str = "full_finetune"
    attack_steps: int = 1000
    attack_lr: float = 1e-3
    attack_rank: int = 2
    attack_batch: int = 4
    attack_prompt_index: int = 0
    attack_optimizer: str = "adam"

    n_generate: int = 30
    gen_steps: int = 50
    threshold: float = 0.5

    embedder_hidden: int = 64
    embedder_feat_dim: int = 16
    embedder_steps: int = 1500
    embedder_lr: float = 3e-3
    embedder_batch: int = 32
    embedder_scale: float = 10.0

    grid_seeds: tuple[int, ...] = (0, 1, 2)
    grid_defenses: tuple[str, ...] = (
        "none",
        "image_specific_transfer",
        "gradient_avg_universal",
        "id_cloak",
        "id_cloak_point",
    )
    include_train_report: bool = True

    transfer_enabled: bool = False
    attacker_widths: tuple[int, ...] = (96, 96)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_h, self.image_w)

    def cloak_config(self) -> CloakOptConfig:
        return CloakOptConfig(
            eta=self.cloak_eta,
            alpha=self.cloak_alpha,
            n_outer=self.cloak_n_outer,
            m_inner=self.cloak_m_inner,
            sampler_steps=self.cloak_sampler_steps,
            t_min=self.cloak_t_min,
            t_max=self.cloak_t_max if self.cloak_t_max > 0 else None,
            pre_search=self.cloak_pre_search,
            scale_by_signal=self.cloak_scale_by_signal,
            truncation=self.cloak_truncation,
            seed=self.seed,
        )

    def baseline_config(self) -> BaselineConfig:
        # one noise budget for every method, by design
        return BaselineConfig(
            eta=self.cloak_eta,
            alpha=self.baseline_alpha,
            steps=self.baseline_steps,
            t_min=self.cloak_t_min,
            t_max=self.cloak_t_max if self.cloak_t_max > 0 else None,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            method=self.attack_method,
            steps=self.attack_steps,
            lr=self.attack_lr,
            rank=self.attack_rank,
            batch_size=self.attack_batch,
            prompt_index=self.attack_prompt_index,
            optimizer=self.attack_optimizer,
            seed=self.seed,
        )

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(
            hidden=self.embedder_hidden,
            feat_dim=self.embedder_feat_dim,
            scale=self.embedder_scale,
            steps=self.embedder_steps,
            lr=self.embedder_lr,
            batch_size=self.embedder_batch,
        )


_SECTIONS = {
    "seed": "run.seed",
    "out_dir": "run.out_dir",
    "schedule_t": "schedule.t",
    "schedule_kind": "schedule.kind",
    "image_h": "data.image_h",
    "image_w": "data.image_w",
    "n_train": "data.n_train",
    "n_test": "data.n_test",
    "context_spread": "data.context_spread",
    "n_identities": "data.n_identities",
    "identity_seed_base": "data.identity_seed_base",
    "n_filler_identities": "data.n_filler_identities",
    "filler_seed_base": "data.filler_seed_base",
    "filler_images": "data.filler_images",
    "embed_images": "data.embed_images",
    "cond_dim": "model.cond_dim",
    "time_dim": "model.time_dim",
    "widths": "model.widths",
    "feat_dim": "model.feat_dim",
    "feat_scale": "model.feat_scale",
    "base_steps": "base.steps",
    "base_lr": "base.lr",
    "base_batch": "base.batch_size",
    "base_optimizer": "base.optimizer",
    "identity_steps": "identity.steps",
    "identity_lr": "identity.lr",
    "anchor_steps": "anchors.steps",
    "anchor_lr": "anchors.lr",
    "cloak_eta": "cloak.eta",
    "cloak_alpha": "cloak.alpha",
    "cloak_n_outer": "cloak.n_outer",
    "cloak_m_inner": "cloak.m_inner",
    "cloak_sampler_steps": "cloak.sampler_steps",
    "cloak_t_min": "cloak.t_min",
    "cloak_t_max": "cloak.t_max",
    "cloak_pre_search": "cloak.pre_search",
    "cloak_scale_by_signal": "cloak.scale_by_signal",
    "cloak_truncation": "cloak.truncation",
    "baseline_steps": "baseline.steps",
    "baseline_alpha": "baseline.alpha",
    "attack_method": "attack.method",
    "attack_steps": "attack.steps",
    "attack_lr": "attack.lr",
    "attack_rank": "attack.rank",
    "attack_batch": "attack.batch_size",
    "attack_prompt_index": "attack.prompt_index",
    "attack_optimizer": "attack.optimizer",
    "n_generate": "eval.n_generate",
    "gen_steps": "eval.gen_steps",
    "threshold": "eval.threshold",
    "embedder_hidden": "embedder.hidden",
    "embedder_feat_dim": "embedder.feat_dim",
    "embedder_steps": "embedder.steps",
    "embedder_lr": "embedder.lr",
    "embedder_batch": "embedder.batch_size",
    "embedder_scale": "embedder.scale",
    "grid_seeds": "grid.seeds",
    "grid_defenses": "grid.defenses",
    "include_train_report": "grid.include_train_report",
    "transfer_enabled": "transfer.enabled",
    "attacker_widths": "transfer.attacker_widths",
}

_KEY_TO_FIELD = {dotted: name for name, dotted in _SECTIONS.items()}


def _parse_value(raw: str, py_type, key: str):
    raw = raw.strip()
    try:
        if py_type is int:
            return int(raw)
        if py_type is float:
            return float(raw)
        if py_type is str:
            return raw
        if py_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        origin = getattr(py_type, "__origin__", None)
        if origin is tuple:
            inner = py_type.__args__[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_parse_value(p, inner, key) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported config type for {key}: {py_type}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_types() -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


_TYPE_NAMES = {
    "int": int,
    "float": float,
    "str": str,
    "bool": bool,
    "tuple[int, ...]": tuple[int, ...],
    "tuple[str, ...]": tuple[str, ...],
}


def _resolve_type(annotation) -> type:
    if isinstance(annotation, str):
        return _TYPE_NAMES[annotation]
    return annotation


def config_keys() -> tuple[str, ...]:
    """All dotted config keys, in schema order."""

    return tuple(_SECTIONS[f.name] for f in dataclasses.fields(ExperimentConfig))


def parse_overrides(pairs: dict[str, str]) -> dict[str, object]:
    """Typed field overrides from raw dotted-key strings; rejects unknowns."""

    types = _field_types()
    out: dict[str, object] = {}
    for key, raw in pairs.items():
        name = _KEY_TO_FIELD.get(key, key if key in types else None)
        if name is None or name not in types:
            raise ConfigError(f"unknown config key: {key!r}")
        out[name] = _parse_value(raw, _resolve_type(types[name]), key)
    return out


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    cfg = dataclasses.replace(cfg, **parse_overrides(pairs))
    validate_config(cfg)
    return cfg


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read a key=value file on top of the defaults (or a given base)."""

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return apply_overrides(base if base is not None else ExperimentConfig(), pairs)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical dotted-key rendering; parsing it back reproduces cfg."""

    lines = [
        f"{_SECTIONS[f.name]}={_format_value(getattr(cfg, f.name))}"
        for f in dataclasses.fields(cfg)
    ]
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig) -> None:
    """Cross-field checks; module configs recheck their own invariants."""

    problems: list[str] = []
    if cfg.schedule_t < 1:
        problems.append("schedule.t must be >= 1")
    if cfg.schedule_kind not in ("linear", "cosine"):
        problems.append(f"schedule.kind must be linear or cosine, got {cfg.schedule_kind!r}")
    if cfg.image_h < 1 or cfg.image_w < 1:
        problems.append("image dimensions must be >= 1")
    if cfg.n_train < 1 or cfg.n_test < 1:
        problems.append("data.n_train and data.n_test must be >= 1")
    if cfg.n_identities < 1:
        problems.append("data.n_identities must be >= 1")
    if cfg.context_spread < 0:
        problems.append("data.context_spread must be >= 0")
    if cfg.embed_images < cfg.n_train + cfg.n_test:
        problems.append("data.embed_images must cover the experiment split")
    if cfg.n_filler_identities < 1 or cfg.filler_images < 2:
        problems.append("base corpus needs >= 1 filler identity with >= 2 images each")
    if not cfg.widths or any(w < 1 for w in cfg.widths):
        problems.append("model.widths must be positive")
    if cfg.feat_dim < 0 or cfg.feat_scale <= 0:
        problems.append("model.feat_dim must be >= 0 and model.feat_scale positive")
    if cfg.cloak_sampler_steps > cfg.schedule_t or cfg.gen_steps > cfg.schedule_t:
        problems.append("sampler steps cannot exceed schedule.t")
    if not 0 < cfg.threshold < 1:
        problems.append("eval.threshold must lie in (0, 1)")
    if not cfg.grid_seeds:
        problems.append("grid.seeds must be nonempty")
    unknown = set(cfg.grid_defenses) - {
        "none", "image_specific_transfer", "gradient_avg_universal", "id_cloak", "id_cloak_point"
    }
    if unknown:
        problems.append(f"unknown defenses in grid.defenses: {sorted(unknown)}")
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        cfg.cloak_config()
        cfg.baseline_config()
        cfg.attack_config()
        cfg.embedder_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def smoke_config(out_dir: str = "runs/smoke") -> ExperimentConfig:
    """A minutes-scale end-to-end preset: tiny images, short training."""

    return ExperimentConfig(
        out_dir=out_dir,
        schedule_t=50,
        image_h=8,
        image_w=8,
        n_identities=2,
        n_filler_identities=4,
        filler_images=10,
        embed_images=16,
        cond_dim=12,
        time_dim=8,
        widths=(48, 48),
        feat_dim=32,
        base_steps=400,
        identity_steps=120,
        anchor_steps=20,
        cloak_n_outer=20,
        cloak_m_inner=4,
        cloak_sampler_steps=10,
        attack_steps=120,
        n_generate=6,
        gen_steps=10,
        embedder_steps=300,
        embedder_hidden=32,
        grid_seeds=(0,),
        grid_defenses=("none", "id_cloak"),
        include_train_report=False,
    )


# Defaults that mirror the reference protocol, asserted as-is by the tests.
PINNED_DEFAULTS: dict[str, object] = {
    "cloak.eta": 16.0 / 255.0,
    "cloak.alpha": 0.05,
    "cloak.n_outer": 200,
    "cloak.m_inner": 10,
    "cloak.sampler_steps": 50,
    "identity.steps": 1000,
    "anchors.steps": 50,
    "anchors.lr": 1e-3,
    "attack.steps": 1000,
    "data.n_train": 4,
    "data.n_test": 8,
    "eval.n_generate": 30,
    "eval.gen_steps": 50,
}
