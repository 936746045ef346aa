"""Command line front end.

Every subcommand reads its knobs from the layered config: built-in
defaults, then an optional ``--config FILE``, then per-key flags
(``--cloak.n_outer 20``) or ``--set key=value`` overrides, in that order.
Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tns
from .attack import generate_batch, personalize_attack
from .cloak import apply_cloak_image, optimize_cloak
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_keys,
    load_config,
    smoke_config,
)
from .data import PIXEL_RANGE, IdentityDataset, import_dataset, save_dataset, synth_dataset
from .errors import ConfigError, DataError, NumericError
from .identity import core_identity, diversify_contexts, estimate_subspace, learn_identity
from .metrics import evaluate_protection
from .pipeline import run_pipeline, train_base_model
from .report import emit_report
from .rng import RngState
from .schedule import make_schedule
from .textenc import DEFAULT_TEMPLATES, PromptTemplate, Vocabulary, init_encoder

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_FLAG_PREFIX = "cfgkey__"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", default=None, help="key=value config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    group = parser.add_argument_group("config key overrides")
    for key in config_keys():
        group.add_argument(
            f"--{key}", dest=_FLAG_PREFIX + key.replace(".", "__"),
            metavar="V", default=None, help=argparse.SUPPRESS,
        )


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = smoke_config() if getattr(args, "smoke", False) else ExperimentConfig()
    cfg = load_config(args.config, base=base) if args.config else base
    pairs: dict[str, str] = {}
    for name, value in vars(args).items():
        if name.startswith(_FLAG_PREFIX) and value is not None:
            pairs[name[len(_FLAG_PREFIX):].replace("__", ".")] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    if pairs:
        cfg = apply_overrides(cfg, pairs)
    return cfg


def _load_dataset(path: str) -> IdentityDataset:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    return import_dataset(p)


def _prompts(vocab) -> tuple[PromptTemplate, ...]:
    return tuple(PromptTemplate.parse(t, vocab) for t in DEFAULT_TEMPLATES)


def _cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    seed = args.identity_seed if args.identity_seed is not None else cfg.identity_seed_base
    ds = synth_dataset(seed, cfg.n_train, cfg.n_test, cfg.context_spread, cfg.image_shape)
    manifest = save_dataset(args.out, ds)
    print(f"wrote {ds.identity_id}: {len(ds.train)} train + {len(ds.test)} test -> {manifest}")
    return EXIT_OK


def _cmd_import_data(args: argparse.Namespace) -> int:
    _resolve_config(args)
    ds = _load_dataset(args.manifest)
    line = (
        f"{ds.identity_id}: {len(ds.train)} train + {len(ds.test)} test, "
        f"shape {ds.image_shape[0]}x{ds.image_shape[1]}"
    )
    if args.out:
        manifest = save_dataset(args.out, ds)
        print(f"{line} -> {manifest}")
    else:
        print(line)
    return EXIT_OK


def _cmd_train_base(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir) if args.out_dir else Path(cfg.out_dir) / "base"
    out.mkdir(parents=True, exist_ok=True)
    root = RngState(cfg.seed)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    model = train_base_model(cfg, sched, root.derive("base"))
    vocab = Vocabulary.from_templates()
    encoder = init_encoder(vocab, cfg.cond_dim, root.derive("encoder-init"))
    tns.save_denoiser(out / "denoiser.tns", model)
    tns.save_encoder(out / "encoder.tns", encoder, vocab)
    print(f"wrote {out / 'denoiser.tns'} and {out / 'encoder.tns'}")
    return EXIT_OK


def _cmd_learn_identity(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(args.data)
    model = tns.load_denoiser(Path(args.base_dir) / "denoiser.tns")
    encoder, vocab = tns.load_encoder(Path(args.base_dir) / "encoder.tns")
    prompts = _prompts(vocab)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    rng = RngState(cfg.seed).derive("identity", ds.identity_id)
    model_p, enc_p = learn_identity(
        ds.train_list(), model, encoder, prompts[cfg.attack_prompt_index],
        cfg.identity_steps, cfg.identity_lr, rng, sched,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tns.save_denoiser(out / "personalized_model.tns", model_p)
    tns.save_encoder(out / "personalized_encoder.tns", enc_p, vocab)
    print(f"wrote personalized model and encoder -> {out}")
    return EXIT_OK


def _cmd_learn_subspace(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(args.data)
    model = tns.load_denoiser(args.model)
    encoder, vocab = tns.load_encoder(args.encoder)
    prompts = _prompts(vocab)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    c_id = core_identity(encoder, prompts[cfg.attack_prompt_index])
    anchors = diversify_contexts(
        ds.train_list(), model, c_id, cfg.anchor_steps, cfg.anchor_lr,
        RngState(cfg.seed).derive("anchors", ds.identity_id), sched,
    )
    sub = estimate_subspace(anchors)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tns.save_anchors(out / "anchors.tns", anchors)
    tns.save_subspace(out / "subspace.tns", sub)
    print(f"wrote {sub.n_anchors} anchors and subspace -> {out}")
    return EXIT_OK


def _cmd_craft_cloak(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    model = tns.load_denoiser(args.model)
    sub = tns.load_subspace(args.subspace)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    rng = RngState(cfg.seed).derive("cloak")
    cloak = optimize_cloak(model, sub, cfg.cloak_config(), sched, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tns.save_cloak(out, cloak)
    print(f"wrote cloak with max |delta| = {cloak.inf_norm():.6f} -> {out}")
    return EXIT_OK


def _cmd_apply_cloak(args: argparse.Namespace) -> int:
    _resolve_config(args)
    ds = _load_dataset(args.data)
    cloak = tns.load_cloak(args.cloak)
    cloaked = IdentityDataset(
        identity_id=ds.identity_id,
        train=np.stack([apply_cloak_image(x, cloak, PIXEL_RANGE) for x in ds.train]),
        test=np.stack([apply_cloak_image(x, cloak, PIXEL_RANGE) for x in ds.test]),
        image_shape=ds.image_shape,
        meta={**ds.meta, "cloaked": "true"},
    )
    manifest = save_dataset(args.out, cloaked)
    print(f"wrote cloaked dataset -> {manifest}")
    return EXIT_OK


def _cmd_attack(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(args.data)
    model = tns.load_denoiser(Path(args.base_dir) / "denoiser.tns")
    encoder, vocab = tns.load_encoder(Path(args.base_dir) / "encoder.tns")
    prompts = _prompts(vocab)
    sched = make_schedule(cfg.schedule_t, cfg.schedule_kind)
    rng = RngState(cfg.seed).derive("attack", ds.identity_id)
    split = ds.train if args.split == "train" else ds.test
    model_a, enc_a = personalize_attack(
        [row for row in split], model, encoder, prompts[cfg.attack_prompt_index],
        cfg.attack_config(), sched, rng,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tns.save_denoiser(out / "attack_model.tns", model_a)
    tns.save_encoder(out / "attack_encoder.tns", enc_a, vocab)
    n_per = max(cfg.n_generate // len(prompts), 1)
    batches = [
        generate_batch(
            model_a, enc_a, prompts[k], n_per, rng.derive("generate", k),
            sched, cfg.gen_steps, PIXEL_RANGE,
        )
        for k in range(len(prompts))
    ]
    tns.write_tensor(out / "generations.tns", np.concatenate(batches))
    print(f"wrote attack model, encoder and {n_per * len(prompts)} generations -> {out}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    generated = tns.read_tensor(args.generated)
    ds = _load_dataset(args.data)
    embedder = tns.load_embedder(args.embedder)
    reference = ds.test if args.split == "test" else ds.train
    report = evaluate_protection(
        generated, reference, embedder, cfg.threshold,
        meta={"identity": ds.identity_id, "split": args.split},
    )
    lines = {
        "ism_proxy": report.ism_proxy,
        "fdfr_proxy": report.fdfr_proxy,
        "quality_proxy": report.quality_proxy,
        "n_generated": report.n_generated,
    }
    for key, value in lines.items():
        print(f"{key}={value}")
    if args.out:
        tns.write_sidecar(args.out, {**lines, **report.meta})
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    exp_dir = args.exp_dir if args.exp_dir else cfg.out_dir
    paths = emit_report(exp_dir)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = run_pipeline(cfg, force=args.force)
    print(f"experiment complete -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloakkit",
        description="identity-level privacy cloaks against personalized diffusion, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    p = add("synth-data", _cmd_synth_data, "render a synthetic identity dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--identity-seed", type=int, default=None)

    p = add("import-data", _cmd_import_data, "validate (and optionally re-save) a dataset")
    p.add_argument("--manifest", required=True, help="dataset manifest or directory")
    p.add_argument("--out", default=None, help="re-save into this directory")

    p = add("train-base", _cmd_train_base, "train the base denoiser and encoder")
    p.add_argument("--out-dir", default=None)

    p = add("learn-identity", _cmd_learn_identity, "personalize the base on one identity")
    p.add_argument("--data", required=True)
    p.add_argument("--base-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("learn-subspace", _cmd_learn_subspace, "fit the identity condition subspace")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="personalized denoiser checkpoint")
    p.add_argument("--encoder", required=True, help="personalized encoder checkpoint")
    p.add_argument("--out-dir", required=True)

    p = add("craft-cloak", _cmd_craft_cloak, "optimize a universal cloak for a subspace")
    p.add_argument("--model", required=True, help="personalized denoiser checkpoint")
    p.add_argument("--subspace", required=True)
    p.add_argument("--out", required=True, help="output cloak file")

    p = add("apply-cloak", _cmd_apply_cloak, "publish a dataset with the cloak added")
    p.add_argument("--cloak", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("attack", _cmd_attack, "fine-tune on published images and generate probes")
    p.add_argument("--data", required=True, help="published dataset")
    p.add_argument("--base-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")

    p = add("evaluate", _cmd_evaluate, "score generated images against clean references")
    p.add_argument("--generated", required=True, help="tensor of generated images")
    p.add_argument("--data", required=True, help="clean reference dataset")
    p.add_argument("--embedder", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None, help="also write metrics as key=value file")

    p = add("report", _cmd_report, "render tables and plots from an experiment directory")
    p.add_argument("--exp-dir", default=None)

    p = add("pipeline", _cmd_pipeline, "run the full experiment end to end")
    p.add_argument("--force", action="store_true", help="overwrite a nonempty output directory")
    p.add_argument("--smoke", action="store_true", help="start from the fast smoke preset")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
