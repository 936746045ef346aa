"""End-to-end protection experiments.

One arm = (identity dataset, defense, seed).  The arm pipeline is:

1. personalize a copy of the base model on the person's clean train images
   (the defender owns the originals),
2. craft the defense from the train split only and apply it to both splits,
3. run the attacker's personalization separately on the published train set
   and the published test set, starting from the attacker's own base model,
4. generate images from each attacked model under every evaluation prompt
   and score them against the clean held-out test images.

Defenses:

* ``none``: publish originals (clean upper baseline).
* ``image_specific_transfer``: per-image cloaks on the train split; test
  images receive a randomly transferred train cloak.
* ``gradient_avg_universal``: one shared cloak from averaged per-image
  loss-ascent gradients.
* ``id_cloak``: the identity-subspace universal cloak.
* ``id_cloak_point``: ablation variant of id_cloak with the subspace
  collapsed to the core identity point (no context diversification).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .attack import AttackConfig, generate_batch, personalize_attack
from .baselines import (
    BaselineConfig,
    gradient_avg_cloak,
    image_specific_cloaks,
    transfer_assignment,
)
from .cloak import Cloak, CloakOptConfig, apply_cloak_image, optimize_cloak
from .data import PIXEL_RANGE, IdentityDataset
from .embedder import IdentityEmbedder
from .identity import (
    IdentitySubspace,
    core_identity,
    diversify_contexts,
    estimate_subspace,
    learn_identity,
)
from .metrics import MetricsReport, evaluate_protection
from .model import DenoiserModel
from .rng import RngState
from .schedule import NoiseSchedule
from .textenc import PromptTemplate, TextEncoderStub

DEFENSES = (
    "none",
    "image_specific_transfer",
    "gradient_avg_universal",
    "id_cloak",
    "id_cloak_point",
)


@dataclass
class ExperimentContext:
    """Everything an arm needs besides the dataset, defense and rng."""

    sched: NoiseSchedule
    base_model: DenoiserModel
    base_encoder: TextEncoderStub
    embedder: IdentityEmbedder
    prompts: tuple[PromptTemplate, ...]
    identity_steps: int = 1000
    identity_lr: float = 1e-4
    anchor_steps: int = 50
    anchor_lr: float = 1e-3
    cloak_cfg: CloakOptConfig = field(default_factory=CloakOptConfig)
    baseline_cfg: BaselineConfig = field(default_factory=BaselineConfig)
    attack_cfg: AttackConfig = field(default_factory=AttackConfig)
    attacker_base_model: DenoiserModel | None = None
    attacker_base_encoder: TextEncoderStub | None = None
    n_generate: int = 30
    gen_steps: int = 50
    threshold: float = 0.5
    clamp: tuple[float, float] = PIXEL_RANGE

    def __post_init__(self) -> None:
        if not self.prompts:
            raise ValueError("need at least one evaluation prompt")
        if not 0 <= self.attack_cfg.prompt_index < len(self.prompts):
            raise ValueError(
                f"attack prompt_index {self.attack_cfg.prompt_index} out of range"
            )
        if self.n_generate < len(self.prompts):
            raise ValueError("n_generate must cover at least one image per prompt")

    def attacker_pair(self) -> tuple[DenoiserModel, TextEncoderStub]:
        model = self.attacker_base_model if self.attacker_base_model is not None else self.base_model
        enc = self.attacker_base_encoder if self.attacker_base_encoder is not None else self.base_encoder
        return model, enc


@dataclass
class SplitOutcome:
    """Evaluation of one published split: aggregate plus per-prompt reports."""

    report: MetricsReport
    per_prompt: tuple[MetricsReport, ...]


ArtifactSink = Callable[[str, object], None]


@dataclass
class ArmResult:
    defense: str
    train: SplitOutcome | None
    test: SplitOutcome
    published_train: np.ndarray | None = None
    published_test: np.ndarray | None = None
    cloak: Cloak | None = None
    per_image_cloaks: tuple[Cloak, ...] | None = None


def _emit(sink: ArtifactSink | None, name: str, obj: object) -> None:
    if sink is not None:
        sink(name, obj)


def craft_defense(
    dataset: IdentityDataset,
    defense: str,
    model_p: DenoiserModel,
    c_id: np.ndarray,
    ctx: ExperimentContext,
    rng: RngState,
    sink: ArtifactSink | None = None,
) -> tuple[np.ndarray, np.ndarray, Cloak | None, tuple[Cloak, ...] | None]:
    """Published (train, test) arrays plus whatever cloaks were crafted.

    Only the train split informs the defense; test images are either clean
    or receive an already-crafted cloak.
    """

    train, test = dataset.train, dataset.test
    if defense == "none":
        return train.copy(), test.copy(), None, None

    if defense in ("id_cloak", "id_cloak_point"):
        if defense == "id_cloak":
            anchors = diversify_contexts(
                dataset.train_list(), model_p, c_id,
                ctx.anchor_steps, ctx.anchor_lr, rng.derive("anchors"), ctx.sched,
            )
            subspace = estimate_subspace(anchors)
            _emit(sink, "anchors", anchors)
        else:
            subspace = IdentitySubspace.point(c_id)
        _emit(sink, "subspace", subspace)
        cloak = optimize_cloak(model_p, subspace, ctx.cloak_cfg, ctx.sched, rng.derive("cloak"))
        pub_train = np.stack([apply_cloak_image(x, cloak, ctx.clamp) for x in train])
        pub_test = np.stack([apply_cloak_image(x, cloak, ctx.clamp) for x in test])
        return pub_train, pub_test, cloak, None

    if defense == "image_specific_transfer":
        cloaks = image_specific_cloaks(
            model_p, dataset.train_list(), c_id, ctx.baseline_cfg, ctx.sched, rng.derive("baseline")
        )
        assign = transfer_assignment(len(test), len(cloaks), rng.derive("transfer"))
        pub_train = np.stack([apply_cloak_image(x, cloaks[i], ctx.clamp) for i, x in enumerate(train)])
        pub_test = np.stack([apply_cloak_image(x, cloaks[assign[j]], ctx.clamp) for j, x in enumerate(test)])
        return pub_train, pub_test, None, tuple(cloaks)

    if defense == "gradient_avg_universal":
        cloak = gradient_avg_cloak(
            model_p, dataset.train_list(), c_id, ctx.baseline_cfg, ctx.sched, rng.derive("baseline")
        )
        pub_train = np.stack([apply_cloak_image(x, cloak, ctx.clamp) for x in train])
        pub_test = np.stack([apply_cloak_image(x, cloak, ctx.clamp) for x in test])
        return pub_train, pub_test, cloak, None

    raise ValueError(f"unknown defense {defense!r}; pick from {DEFENSES}")


def _evaluate_split(
    dataset: IdentityDataset,
    published: np.ndarray,
    split_name: str,
    defense: str,
    ctx: ExperimentContext,
    rng: RngState,
    tags: dict[str, str],
    sink: ArtifactSink | None = None,
) -> SplitOutcome:
    atk_model, atk_enc = ctx.attacker_pair()
    prompt = ctx.prompts[ctx.attack_cfg.prompt_index]
    model_atk, enc_atk = personalize_attack(
        [row for row in published], atk_model, atk_enc, prompt,
        ctx.attack_cfg, ctx.sched, rng.derive("attack", split_name),
    )
    _emit(sink, f"attack_model_{split_name}", model_atk)
    _emit(sink, f"attack_encoder_{split_name}", enc_atk)
    n_per = ctx.n_generate // len(ctx.prompts)
    base_meta = {
        "identity": dataset.identity_id,
        "defense": defense,
        "attack": ctx.attack_cfg.method,
        "split": split_name,
        **tags,
    }
    per_prompt: list[MetricsReport] = []
    batches: list[np.ndarray] = []
    for k in range(len(ctx.prompts)):
        gen = generate_batch(
            model_atk, enc_atk, ctx.prompts[k], n_per,
            rng.derive("generate", split_name, k), ctx.sched, ctx.gen_steps, ctx.clamp,
        )
        batches.append(gen)
        per_prompt.append(
            evaluate_protection(
                gen, dataset.test, ctx.embedder, ctx.threshold,
                meta={**base_meta, "prompt": f"p{k}"},
            )
        )
    aggregate = evaluate_protection(
        np.concatenate(batches), dataset.test, ctx.embedder, ctx.threshold,
        meta={**base_meta, "prompt": "all"},
    )
    _emit(sink, f"generations_{split_name}", np.concatenate(batches))
    return SplitOutcome(report=aggregate, per_prompt=tuple(per_prompt))


def run_protection_experiment(
    dataset: IdentityDataset,
    defense: str,
    ctx: ExperimentContext,
    rng: RngState,
    include_train_report: bool = True,
    tags: dict[str, str] | None = None,
    sink: ArtifactSink | None = None,
) -> ArmResult:
    """Run one full arm; returns paired train-applied and test-applied reports.

    ``tags`` are copied into every report's metadata (e.g. a seed label).
    With ``include_train_report=False`` the train-side attack is skipped and
    ``result.train`` is None.  ``sink`` receives named intermediate
    artifacts (personalized/attacked models, anchors, generations) so
    callers can persist them.
    """

    if defense not in DEFENSES:
        raise ValueError(f"unknown defense {defense!r}; pick from {DEFENSES}")
    if dataset.dim != ctx.base_model.arch.input_dim:
        raise ValueError(
            f"dataset dim {dataset.dim} != model input dim {ctx.base_model.arch.input_dim}"
        )
    tags = dict(tags or {})
    prompt = ctx.prompts[ctx.attack_cfg.prompt_index]
    model_p, enc_p = learn_identity(
        dataset.train_list(), ctx.base_model, ctx.base_encoder, prompt,
        ctx.identity_steps, ctx.identity_lr, rng.derive("identity"), ctx.sched,
    )
    _emit(sink, "personalized_model", model_p)
    _emit(sink, "personalized_encoder", enc_p)
    c_id = core_identity(enc_p, prompt)
    pub_train, pub_test, cloak, per_image = craft_defense(
        dataset, defense, model_p, c_id, ctx, rng, sink
    )
    train_outcome = (
        _evaluate_split(dataset, pub_train, "train", defense, ctx, rng, tags, sink)
        if include_train_report
        else None
    )
    test_outcome = _evaluate_split(dataset, pub_test, "test", defense, ctx, rng, tags, sink)
    return ArmResult(
        defense=defense,
        train=train_outcome,
        test=test_outcome,
        published_train=pub_train,
        published_test=pub_test,
        cloak=cloak,
        per_image_cloaks=per_image,
    )


@dataclass(frozen=True)
class ArmRecord:
    """Grid bookkeeping: which (identity, seed, defense) produced a result."""

    identity_id: str
    seed: int
    defense: str
    result: ArmResult


def run_arm_grid(
    datasets: list[IdentityDataset],
    ctx: ExperimentContext,
    defenses: tuple[str, ...] = DEFENSES,
    seeds: tuple[int, ...] = (0, 1, 2),
    master_seed: int = 0,
    include_train_report: bool = False,
    sink_for: Callable[[str, int, str], ArtifactSink] | None = None,
) -> list[ArmRecord]:
    """Cartesian product of identities, seeds and defenses.

    Every arm gets an rng derived from (master seed, identity, seed,
    defense), so arms are independent and the grid is reproducible under
    reordering or parallel execution.  ``sink_for(identity, seed, defense)``
    may supply a per-arm artifact sink.
    """

    records: list[ArmRecord] = []
    for dataset in datasets:
        for seed in seeds:
            for defense in defenses:
                rng = RngState(master_seed).derive("arm", dataset.identity_id, seed, defense)
                sink = sink_for(dataset.identity_id, seed, defense) if sink_for else None
                result = run_protection_experiment(
                    dataset, defense, ctx, rng,
                    include_train_report=include_train_report,
                    tags={"seed": str(seed)},
                    sink=sink,
                )
                records.append(ArmRecord(dataset.identity_id, seed, defense, result))
    return records


def with_attacker(
    ctx: ExperimentContext, model: DenoiserModel, encoder: TextEncoderStub
) -> ExperimentContext:
    """Context variant where the attacker personalizes a different base."""

    return replace(ctx, attacker_base_model=model, attacker_base_encoder=encoder)


def base_corpus_pairs(
    datasets: list[IdentityDataset], cond_dim: int, rng: RngState
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, condition) pairs for base-model training.

    Each corpus identity gets one fixed Gaussian condition vector, teaching
    the base model that conditions select identities; personalization later
    exploits this by steering the condition toward a new identity.
    """

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for k, ds in enumerate(datasets):
        c_k = rng.derive("cond", k).normal(cond_dim)
        for arr in (ds.train, ds.test):
            pairs.extend((row.copy(), c_k.copy()) for row in arr)
    return pairs
