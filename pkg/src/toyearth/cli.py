"""Command-line entrypoint orchestrating every workflow.

Exit codes: 0 success, 2 usage errors (argparse), 3 missing dependency
checkpoints. Every artifact-producing command stores its fully resolved
configuration (plus the content hashes of the checkpoints it consumed)
next to its outputs, and prints it, so any artifact can be traced and
reproduced.

Defaults are layered: config file (--config or TOYEARTH_CONFIG) < process
environment (TOYEARTH_<FLAG>) < explicit flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as toydata
from .backbone import DenoiserConfig, editor_config
from .checkpoints import MissingCheckpointError, load_manifest
from .data import BuildConfig, build_dataset, load_manifest as load_data_manifest, manifest_stats
from .diffusion import (
    DcaConfig,
    GuidanceConfig,
    ScheduleParams,
    load_pipeline,
    inpaint as run_inpaint,
    sample as run_sample,
    sample_batch,
    train_dca,
)
from .lora import LoraSpec, load_adapted_pipeline, train_adapter
from .metrics import (
    FeatureModelConfig,
    augmentation_study,
    class_index,
    clip_score,
    cls_oa,
    feature_stats,
    fid,
    fit_feature_extractor,
    guidance_sweep,
    labelled_images,
    load_feature_model,
    object_count_probe,
    render_summary,
    resolution_probe,
    write_report,
)
from .textenc import ContrastiveTrainConfig, TextEncConfig, train_contrastive
from .vae import VaeConfig, VaeTrainConfig, images_from_manifest, train_vae


def write_run_config(out_dir: Path | str, command: str, resolved: dict,
                     dependencies: dict[str, str] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "resolved_config": resolved,
               "input_checkpoint_hashes": dependencies or {}}
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    (out / "run_config.json").write_text(text + "\n")
    print(text)


def checkpoint_hashes(**paths: str) -> dict[str, str]:
    return {name: load_manifest(path).content_hash for name, path in paths.items()}


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_data_build(args) -> int:
    config = BuildConfig(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        global_seed=args.seed, out_dir=args.out,
        modalities=tuple(args.modalities.split(",")), force=args.force,
    )
    manifest = build_dataset(config)
    write_run_config(args.out, "data build", asdict(config))
    stats = manifest_stats(manifest)
    print(f"built {len(manifest.records)} records in {args.out}")
    print(json.dumps(stats, indent=2))
    return 0


def cmd_data_stats(args) -> int:
    manifest = load_data_manifest(args.data)
    print(json.dumps(manifest_stats(manifest), indent=2))
    return 0


def cmd_train_vae(args) -> int:
    manifest = load_data_manifest(args.data)
    model_config = VaeConfig(
        latent_channels=args.latent_channels, base_width=args.base_width,
        kl_weight=args.kl_weight,
    )
    train_config = VaeTrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed
    )
    checkpoint = train_vae(manifest, model_config, train_config, args.out)
    write_run_config(args.out, "train vae",
                     {"model": asdict(model_config), "train": asdict(train_config)})
    print(f"val PSNR {checkpoint.metrics['val_psnr']:.2f} dB -> {args.out}")
    return 0


def cmd_train_clip(args) -> int:
    manifest = load_data_manifest(args.data)
    model_config = TextEncConfig(
        embed_dim=args.embed_dim, layers=args.layers, heads=args.heads,
        image_width=args.image_width,
    )
    train_config = ContrastiveTrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed
    )
    checkpoint = train_contrastive(manifest, model_config, train_config, args.out)
    write_run_config(args.out, "train clip",
                     {"model": asdict(model_config), "train": asdict(train_config)})
    print(f"val retrieval t2i {checkpoint.metrics['val_retrieval_t2i']:.3f} -> {args.out}")
    return 0


def _denoiser_config_for(args, variant: str) -> DenoiserConfig:
    text_dim = load_manifest(args.textenc, "toyearth train clip").config["model"]["embed_dim"]
    base = DenoiserConfig(
        base_width=args.base_width, text_dim=text_dim,
        embed_dim=args.embed_dim, max_timestep=args.timesteps,
    )
    return editor_config(base) if variant == "editor" else base


def cmd_train_diffusion(args) -> int:
    manifest = load_data_manifest(args.data)
    config = DcaConfig(
        p1=args.p1, p2=args.p2, learning_rate=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
    )
    schedule = ScheduleParams(T=args.timesteps, beta_start=args.beta_start,
                              beta_end=args.beta_end)
    denoiser_config = _denoiser_config_for(args, args.variant)
    checkpoint = train_dca(
        manifest, config, args.variant, args.vae, args.textenc, args.out,
        denoiser_config=denoiser_config, schedule_params=schedule,
    )
    write_run_config(
        args.out, f"train diffusion --variant {args.variant}",
        {"dca": asdict(config), "schedule": asdict(schedule),
         "model": asdict(denoiser_config)},
        checkpoint_hashes(vae=args.vae, textenc=args.textenc),
    )
    print(f"final loss {checkpoint.metrics['loss_last']:.4f} -> {args.out}")
    return 0


def _load_pipeline_for(args, denoiser_attr: str = "denoiser"):
    denoiser_dir = getattr(args, denoiser_attr)
    if getattr(args, "adapter", None):
        return load_adapted_pipeline(args.vae, args.textenc, denoiser_dir, args.adapter)
    return load_pipeline(args.vae, args.textenc, denoiser_dir)


def cmd_sample(args) -> int:
    pipeline = _load_pipeline_for(args)
    guidance = GuidanceConfig(omega=args.omega, seed=args.seed)
    image = run_sample(pipeline, args.text, args.resolution, guidance)
    out = Path(args.out)
    toydata.save_image(image, out)
    sidecar = {
        "text": args.text, "resolution": args.resolution,
        "omega": args.omega, "seed": args.seed,
        "checkpoint_hash": pipeline.checkpoint_hash,
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_inpaint(args) -> int:
    pipeline = _load_pipeline_for(args, "editor")
    image = toydata.load_image(Path(args.image))
    mask_img = toydata.load_image(Path(args.mask))
    mask = (toydata.luminance(mask_img) > 0.5).astype(np.float32)
    guidance = GuidanceConfig(omega=args.omega, seed=args.seed)
    out_img = run_inpaint(pipeline, image, mask, args.text, args.resolution, guidance)
    toydata.save_image(out_img, Path(args.out))
    print(f"wrote {args.out}")
    return 0


def cmd_canvas_demo(args) -> int:
    from .canvas import CanvasModels, extend, new_canvas, render_region, save_session, seam_score

    models = CanvasModels(
        generator=load_pipeline(args.vae, args.textenc, args.generator),
        editor=load_pipeline(args.vae, args.textenc, args.editor),
    )
    prompts = args.prompts.split(",")
    canvas = new_canvas(prompts[0], args.resolution,
                        GuidanceConfig(omega=args.omega, seed=args.seed), models)
    op_seed = args.seed
    for prompt in prompts:
        for _ in range(2):  # two half-window steps advance one full tile
            op_seed += 1
            extend(canvas, "E", prompt, GuidanceConfig(omega=args.omega, seed=op_seed), models)
    out = Path(args.out)
    save_session(canvas, out / "session", models.checkpoint_hashes())
    full = render_region(canvas, canvas.bounds())
    toydata.save_image(full, out / "canvas.png")
    score = seam_score(canvas)
    write_run_config(out, "canvas demo", vars(args), models.checkpoint_hashes())
    print(f"canvas {full.shape[1]}x{full.shape[0]} px, seam score {score:.3f} -> {out}")
    return 0


def cmd_finetune_lora(args) -> int:
    manifest = load_data_manifest(args.data)
    spec = LoraSpec(rank=args.rank, alpha_scale=args.alpha)
    config = DcaConfig(
        p1=args.p1, p2=args.p2, learning_rate=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
    )
    checkpoint = train_adapter(
        manifest, args.modality, spec, config,
        args.vae, args.textenc, args.base, args.out,
    )
    write_run_config(
        args.out, "finetune lora",
        {"spec": asdict(spec), "train": asdict(config), "modality": args.modality},
        checkpoint_hashes(vae=args.vae, textenc=args.textenc, base=args.base),
    )
    print(f"adapter params {checkpoint.metrics['adapter_params']} -> {args.out}")
    return 0


# -- eval subcommands --------------------------------------------------------


def _test_prompts(manifest, n: int) -> tuple[list[str], list[int]]:
    records = manifest.select(split="test", modality="RGB")
    chosen = [records[i % len(records)] for i in range(n)]
    # ensure every class appears so accuracy metrics stay defined
    by_class = {}
    for r in records:
        by_class.setdefault(r.scene_class, r)
    for k, r in enumerate(by_class.values()):
        chosen[k % len(chosen)] = r
    return [r.caption for r in chosen], [class_index(r.scene_class) for r in chosen]


def _generate_set(pipeline, prompts, labels, omega, seed):
    seeds = [int(np.int64(seed) + i) for i in range(len(prompts))]
    images = sample_batch(pipeline, prompts, [None] * len(prompts), seeds, omega)
    return [(images[i], labels[i]) for i in range(len(prompts))]


def cmd_eval_fid(args) -> int:
    manifest = load_data_manifest(args.data)
    feature_model, _ = load_feature_model(args.feature_model) if args.feature_model else (None, None)
    if feature_model is None:
        cp = fit_feature_extractor(manifest, FeatureModelConfig(seed=args.seed),
                                   Path(args.out) / "feature-model")
        feature_model, _ = load_feature_model(Path(args.out) / "feature-model")
        print(f"feature extractor test accuracy {cp.metrics['test_accuracy']:.3f}")
    pipeline = _load_pipeline_for(args)
    prompts, labels = _test_prompts(manifest, args.n)
    generated = _generate_set(pipeline, prompts, labels, args.omega, args.seed)
    real_images, _ = labelled_images(manifest, "test")
    value = fid(
        feature_stats(feature_model, real_images),
        feature_stats(feature_model, np.stack([g[0] for g in generated])),
    )
    rows = [{"omega": args.omega, "n": args.n, "fid": value}]
    write_report(rows, Path(args.out) / "fid.tsv")
    print(render_summary("toy-FID", rows))
    return 0


def cmd_eval_clipscore(args) -> int:
    from .textenc import load_textenc

    manifest = load_data_manifest(args.data)
    model, tokenizer, _ = load_textenc(args.textenc)
    pipeline = _load_pipeline_for(args)
    prompts, labels = _test_prompts(manifest, args.n)
    generated = _generate_set(pipeline, prompts, labels, args.omega, args.seed)
    score = clip_score([g[0] for g in generated], prompts, model, tokenizer)
    real_images, _ = labelled_images(manifest, "test")
    real_records = manifest.select(split="test", modality="RGB")
    real_score = clip_score(
        list(real_images), [r.caption for r in real_records], model, tokenizer
    )
    rows = [{"set": "generated", "clip_score": score},
            {"set": "real", "clip_score": real_score}]
    write_report(rows, Path(args.out) / "clipscore.tsv")
    print(render_summary("toy CLIP score", rows))
    return 0


def cmd_eval_clsoa(args) -> int:
    manifest = load_data_manifest(args.data)
    pipeline = _load_pipeline_for(args)
    prompts, labels = _test_prompts(manifest, args.n)
    generated = _generate_set(pipeline, prompts, labels, args.omega, args.seed)
    accuracy = cls_oa(generated, manifest, FeatureModelConfig(seed=args.seed, epochs=args.classifier_epochs))
    rows = [{"omega": args.omega, "n": args.n, "cls_oa": accuracy}]
    write_report(rows, Path(args.out) / "clsoa.tsv")
    print(render_summary("zero-shot Cls-OA", rows))
    return 0


def cmd_eval_sweep(args) -> int:
    manifest = load_data_manifest(args.data)
    pipeline = _load_pipeline_for(args)
    feature_model, _ = load_feature_model(args.feature_model)
    real_images, _ = labelled_images(manifest, "test")
    rows = guidance_sweep(
        pipeline, feature_model, feature_stats(feature_model, real_images),
        manifest, [float(w) for w in args.omegas.split(",")], args.n_per_omega,
        FeatureModelConfig(seed=args.seed, epochs=args.classifier_epochs), seed=args.seed,
    )
    write_report(rows, Path(args.out) / "sweep.tsv")
    print(render_summary("guidance sweep", rows))
    return 0


def cmd_eval_resprobe(args) -> int:
    pipeline = _load_pipeline_for(args)
    rows = resolution_probe(
        pipeline, args.prompt, [float(r) for r in args.resolutions.split(",")],
        args.n_per_res, omega=args.omega, seed=args.seed,
    )
    write_report(rows, Path(args.out) / "resprobe.tsv")
    print(render_summary("resolution probe", rows))
    return 0


def cmd_eval_augment(args) -> int:
    manifest = load_data_manifest(args.data)
    pipeline = _load_pipeline_for(args)
    prompts, labels = _test_prompts(manifest, args.n_synthetic)
    synthetic = _generate_set(pipeline, prompts, labels, args.omega, args.seed)
    configs = {
        "narrow": FeatureModelConfig(width=8, seed=args.seed, epochs=args.classifier_epochs),
        "wide": FeatureModelConfig(width=16, seed=args.seed, epochs=args.classifier_epochs),
    }
    rows = augmentation_study(manifest, synthetic, manifest, configs)
    write_report(rows, Path(args.out) / "augment.tsv")
    print(render_summary("augmentation study", rows))
    return 0


def cmd_eval_countprobe(args) -> int:
    pipeline = _load_pipeline_for(args)
    counts = [int(c) for c in args.counts.split(",")] if args.counts else []
    pairs = [
        (f"{toydata.COUNT_WORDS[c - 1]} white storage tanks on a piece of bare land", c)
        for c in counts
    ]
    rows = object_count_probe(pipeline, pairs, args.n_per_prompt,
                              omega=args.omega, seed=args.seed)
    write_report(rows, Path(args.out) / "countprobe.tsv")
    print(render_summary("object count probe", rows))
    return 0


def cmd_serve(args) -> int:
    from .service import load_service_config, run_service

    overrides = {
        "host": args.host, "port": args.port, "persist_dir": args.persist_dir,
        "vae_dir": args.vae, "textenc_dir": args.textenc,
        "generator_dir": args.generator, "editor_dir": args.editor,
        "static_dir": args.static_dir,
    }
    config = load_service_config(args.config, overrides=overrides)
    print(json.dumps(asdict(config), indent=2, sort_keys=True))
    run_service(config)
    return 0


def cmd_eval_fit_features(args) -> int:
    manifest = load_data_manifest(args.data)
    config = FeatureModelConfig(epochs=args.epochs, seed=args.seed)
    checkpoint = fit_feature_extractor(manifest, config, args.out)
    write_run_config(args.out, "eval fit-features", asdict(config))
    print(f"test accuracy {checkpoint.metrics['test_accuracy']:.3f} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common_model_flags(p, editor=False, denoiser_flag="--denoiser"):
    p.add_argument("--vae", required=True, help="VAE checkpoint directory")
    p.add_argument("--textenc", required=True, help="text encoder checkpoint directory")
    p.add_argument(denoiser_flag, dest=denoiser_flag.lstrip("-").replace("-", "_"),
                   required=True, help="denoiser checkpoint directory")
    p.add_argument("--adapter", default=None, help="optional adapter checkpoint to apply")


def _add_eval_common(p):
    p.add_argument("--omega", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toyearth",
        description="Desk-scale text-driven satellite-tile generation studio.",
    )
    parser.add_argument("--config", default=os.environ.get("TOYEARTH_CONFIG"),
                        help="JSON file with default values for any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    # data
    data = sub.add_parser("data", help="dataset building and statistics")
    data_sub = data.add_subparsers(dest="subcommand", required=True)
    p = data_sub.add_parser("build", help="render the procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modalities", default="RGB",
                   help="comma list from RGB,NIR,PAN,LOWRES,FOG")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_data_build)
    p = data_sub.add_parser("stats", help="print manifest statistics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_data_stats)

    # train
    train = sub.add_parser("train", help="training stages")
    train_sub = train.add_subparsers(dest="subcommand", required=True)
    p = train_sub.add_parser("vae", help="train the compression autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--kl-weight", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_vae)

    p = train_sub.add_parser("clip", help="train the contrastive dual encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--image-width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_clip)

    p = train_sub.add_parser("diffusion", help="train a denoiser variant")
    p.add_argument("--variant", choices=("generator", "editor"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--textenc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--p1", type=float, default=0.1)
    p.add_argument("--p2", type=float, default=0.1)
    p.add_argument("--timesteps", type=int, default=200)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--base-width", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_diffusion)

    # sample / inpaint
    p = sub.add_parser("sample", help="generate one image")
    _add_common_model_flags(p)
    p.add_argument("--text", default=None)
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--omega", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inpaint", help="regenerate a masked region of an image")
    _add_common_model_flags(p, denoiser_flag="--editor")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="PNG; white pixels are regenerated")
    p.add_argument("--text", default=None)
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--omega", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inpaint)

    # canvas demo
    canvas = sub.add_parser("canvas", help="canvas workflows")
    canvas_sub = canvas.add_subparsers(dest="subcommand", required=True)
    p = canvas_sub.add_parser("demo", help="multi-prompt eastward construction session")
    p.add_argument("--vae", required=True)
    p.add_argument("--textenc", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--editor", required=True)
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--omega", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompts",
                   default="brown farmland with green crop fields,a dense forest,"
                           "wide blue water,dry sandy desert,green fields,deep blue ocean water")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_canvas_demo)

    # lora
    finetune = sub.add_parser("finetune", help="parameter-efficient fine-tuning")
    finetune_sub = finetune.add_subparsers(dest="subcommand", required=True)
    p = finetune_sub.add_parser("lora", help="train a low-rank adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--textenc", required=True)
    p.add_argument("--base", required=True, help="generator checkpoint to adapt")
    p.add_argument("--out", required=True)
    p.add_argument("--modality", default="NIR")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--p1", type=float, default=0.1)
    p.add_argument("--p2", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune_lora)

    # eval
    ev = sub.add_parser("eval", help="evaluation protocol")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)

    p = ev_sub.add_parser("fit-features", help="train the shared feature extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_fit_features)

    p = ev_sub.add_parser("fid", help="toy-FID of generated vs real test images")
    _add_common_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--feature-model", default=None)
    p.add_argument("--n", type=int, default=128)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_fid)

    p = ev_sub.add_parser("clipscore", help="similarity of generated images to prompts")
    _add_common_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=64)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_clipscore)

    p = ev_sub.add_parser("clsoa", help="zero-shot classification overall accuracy")
    _add_common_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--classifier-epochs", type=int, default=30)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_clsoa)

    p = ev_sub.add_parser("sweep", help="guidance-scale sweep table")
    _add_common_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--feature-model", required=True)
    p.add_argument("--omegas", default="1.5,2,3,4,5,6,7")
    p.add_argument("--n-per-omega", type=int, default=96)
    p.add_argument("--classifier-epochs", type=int, default=30)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_sweep)

    p = ev_sub.add_parser("resprobe", help="resolution controllability probe")
    _add_common_model_flags(p)
    p.add_argument("--prompt", default="white storage tanks")
    p.add_argument("--resolutions", default="1,2,4")
    p.add_argument("--n-per-res", type=int, default=32)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_resprobe)

    p = ev_sub.add_parser("augment", help="data augmentation study")
    _add_common_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n-synthetic", type=int, default=96)
    p.add_argument("--classifier-epochs", type=int, default=30)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_augment)

    p = ev_sub.add_parser("countprobe", help="requested vs generated object counts")
    _add_common_model_flags(p)
    p.add_argument("--counts", default="1,2,3,4,5")
    p.add_argument("--n-per-prompt", type=int, default=16)
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval_countprobe)

    # serve
    p = sub.add_parser("serve", help="run the studio HTTP service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--vae", default=None)
    p.add_argument("--textenc", default=None)
    p.add_argument("--generator", default=None)
    p.add_argument("--editor", default=None)
    p.add_argument("--persist-dir", default=None)
    p.add_argument("--static-dir", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def _walk_parsers(parser):
    yield parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                yield from _walk_parsers(child)


def apply_layered_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Fill parser defaults from config file and environment (file < env)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=os.environ.get("TOYEARTH_CONFIG"))
    known, _ = pre.parse_known_args(argv)
    layers: dict[str, str] = {}
    if known.config:
        layers.update(json.loads(Path(known.config).read_text()))
    for key, value in os.environ.items():
        if key.startswith("TOYEARTH_") and key not in ("TOYEARTH_CONFIG",):
            layers[key[len("TOYEARTH_"):].lower()] = value
    if not layers:
        return
    for sub in _walk_parsers(parser):
        for action in sub._actions:
            if action.dest in layers and action.dest != "help":
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    continue
                raw = layers[action.dest]
                action.default = action.type(raw) if (action.type and raw is not None) else raw
                action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    apply_layered_defaults(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
