"""Low-rank adapters over the denoiser's attention projections.

An adapter adds W' = W + (alpha/r) * B @ A to every attention projection
(query/key/value/output, both the 1x1 convs and the linears) while the
base weights stay frozen. B starts at zero, so a freshly injected adapter
is an exact no-op. Adapters are checkpointed with the content hash of the
base model they were trained against and refuse to attach to anything else.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import CrossAttention, Denoiser
from .checkpoints import (
    CheckpointManifest,
    load_manifest,
    load_state,
    save_checkpoint,
)
from .data import Manifest
from .diffusion import DcaConfig, Pipeline, TrainState, load_pipeline, training_step
from .seeding import rng as np_rng, seeded_init, torch_generator
from .textenc import load_textenc
from .vae import images_from_manifest, load_vae


@dataclass
class LoraSpec:
    rank: int = 4
    alpha_scale: float | None = None  # defaults to rank, i.e. scale 1
    target_layers: str = "attention"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")

    @property
    def scale(self) -> float:
        alpha = self.rank if self.alpha_scale is None else self.alpha_scale
        return alpha / self.rank


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.base = base
        self.scale = scale
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def delta(self) -> torch.Tensor:
        return self.scale * self.lora_b @ self.lora_a


class LoraConv1x1(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scale: float):
        super().__init__()
        if base.kernel_size != (1, 1):
            raise ValueError("LoRA conv wrapper only supports 1x1 convolutions")
        self.base = base
        self.scale = scale
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_channels) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_channels, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        down = F.conv2d(x, self.lora_a[:, :, None, None])
        up = F.conv2d(down, self.lora_b[:, :, None, None])
        return self.base(x) + self.scale * up

    def delta(self) -> torch.Tensor:
        return self.scale * self.lora_b @ self.lora_a


ATTENTION_PROJECTIONS = ("to_q", "to_k", "to_v", "proj")


def _target_layers(model: Denoiser, spec: LoraSpec) -> list[tuple[nn.Module, str]]:
    if spec.target_layers != "attention":
        raise ValueError(f"unknown target selector {spec.target_layers!r}")
    found = []
    for module in model.modules():
        if isinstance(module, CrossAttention):
            for name in ATTENTION_PROJECTIONS:
                found.append((module, name))
    if not found:
        raise ValueError("no attention projections found in the model")
    return found


def inject(model: Denoiser, spec: LoraSpec, seed: int = 0) -> list[tuple[str, nn.Module]]:
    """Wrap every target projection in place; returns (name, wrapper) pairs.

    Base parameters are frozen; only the added low-rank factors can train.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    wrappers: list[tuple[str, nn.Module]] = []
    with seeded_init(seed, "lora"):
        index = 0
        for module, attr in _target_layers(model, spec):
            base = getattr(module, attr)
            if isinstance(base, LoraLinear | LoraConv1x1):
                raise ValueError("model already has adapters injected")
            wrapper_cls = LoraLinear if isinstance(base, nn.Linear) else LoraConv1x1
            wrapper = wrapper_cls(base, spec.rank, spec.scale)
            setattr(module, attr, wrapper)
            wrappers.append((f"attn{index}.{attr}", wrapper))
            index += 1
    return wrappers


def adapter_parameter_count(model: Denoiser, spec: LoraSpec) -> int:
    """Analytic count: sum of rank * (fan_in + fan_out) over targets."""
    total = 0
    for module, attr in _target_layers(model, spec):
        base = getattr(module, attr)
        if isinstance(base, (LoraLinear, LoraConv1x1)):
            base = base.base
        if isinstance(base, nn.Linear):
            total += spec.rank * (base.in_features + base.out_features)
        else:
            total += spec.rank * (base.in_channels + base.out_channels)
    return total


def adapter_state(wrappers: list[tuple[str, nn.Module]]) -> dict[str, torch.Tensor]:
    state = {}
    for name, wrapper in wrappers:
        state[f"{name}.lora_a"] = wrapper.lora_a.detach().clone()
        state[f"{name}.lora_b"] = wrapper.lora_b.detach().clone()
    return state


def load_adapter_into(wrappers: list[tuple[str, nn.Module]], state: dict[str, torch.Tensor]) -> None:
    for name, wrapper in wrappers:
        with torch.no_grad():
            wrapper.lora_a.copy_(state[f"{name}.lora_a"])
            wrapper.lora_b.copy_(state[f"{name}.lora_b"])


def merge_adapter(model: Denoiser, spec: LoraSpec, state: dict[str, torch.Tensor]) -> Denoiser:
    """Fold the low-rank deltas into the base weights of a plain model."""
    index = 0
    with torch.no_grad():
        for module, attr in _target_layers(model, spec):
            base = getattr(module, attr)
            a = state[f"attn{index}.{attr}.lora_a"]
            b = state[f"attn{index}.{attr}.lora_b"]
            delta = spec.scale * b @ a
            if isinstance(base, nn.Linear):
                base.weight += delta
            else:
                base.weight += delta[:, :, None, None]
            index += 1
    return model


def train_adapter(
    manifest: Manifest,
    modality: str,
    spec: LoraSpec,
    config: DcaConfig,
    vae_dir: Path | str,
    textenc_dir: Path | str,
    base_dir: Path | str,
    out_dir: Path | str,
) -> CheckpointManifest:
    """Fine-tune only the adapter factors on one modality's records."""
    records = manifest.select(split="train", modality=modality)
    if not records:
        raise ValueError(f"manifest has no records for modality {modality!r}")
    vae, vae_manifest = load_vae(vae_dir)
    text_model, tokenizer, _ = load_textenc(textenc_dir)
    base_manifest = load_manifest(base_dir, produced_by="toyearth train diffusion")
    base_pipeline = load_pipeline(vae_dir, textenc_dir, base_dir)
    model = base_pipeline.denoiser
    frozen_before = [(p, p.detach().clone()) for p in model.parameters()]
    wrappers = inject(model, spec, seed=config.seed)
    trainable = [p for _, w in wrappers for p in (w.lora_a, w.lora_b)]
    opt = torch.optim.Adam(trainable, lr=config.learning_rate)
    state = TrainState(
        model, opt, vae, text_model, tokenizer,
        base_pipeline.schedule, base_pipeline.latent_scale,
    )

    images = images_from_manifest(manifest, "train", modality=modality)
    captions = [r.caption for r in records]
    resolutions = [r.resolution_m_per_px for r in records]
    gen = torch_generator(config.seed, "lora-order", modality)
    step_rng = np_rng(config.seed, "lora-steps", modality)
    losses = []
    n = len(records)
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, config.batch_size):
            sel = perm[start : start + config.batch_size]
            batch = [(images[i], captions[i], resolutions[i], None) for i in sel]
            losses.append(training_step(state, batch, config, step_rng))

    base_unchanged = all(torch.equal(p, clone) for p, clone in frozen_before)
    metrics = {
        "steps": len(losses),
        "loss_first": losses[0] if losses else None,
        "loss_last": losses[-1] if losses else None,
        "base_unchanged": base_unchanged,
        "adapter_params": adapter_parameter_count(model, spec),
        "modality": modality,
    }
    return save_checkpoint(
        out_dir, "lora-adapter", adapter_state(wrappers),
        config={"spec": asdict(spec), "train": asdict(config), "modality": modality},
        metrics=metrics,
        dependencies={"base": base_manifest.content_hash},
    )


def load_adapted_pipeline(
    vae_dir: Path | str,
    textenc_dir: Path | str,
    base_dir: Path | str,
    adapter_dir: Path | str,
    merge: bool = True,
) -> Pipeline:
    """Base pipeline with an adapter applied (merged or runtime-composed)."""
    pipeline = load_pipeline(vae_dir, textenc_dir, base_dir)
    adapter = load_manifest(adapter_dir, produced_by="toyearth finetune lora")
    if adapter.dependencies.get("base") != pipeline.checkpoint_hash:
        raise ValueError(
            "adapter was trained against a different base checkpoint "
            f"({adapter.dependencies.get('base')} != {pipeline.checkpoint_hash})"
        )
    spec = LoraSpec(**adapter.config["spec"])
    state = load_state(adapter_dir, produced_by="toyearth finetune lora")
    if merge:
        merge_adapter(pipeline.denoiser, spec, state)
    else:
        wrappers = inject(pipeline.denoiser, spec)
        load_adapter_into(wrappers, state)
    pipeline.denoiser.eval()
    return pipeline
