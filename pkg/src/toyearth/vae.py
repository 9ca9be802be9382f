"""Image compression autoencoder defining the latent space diffusion runs in.

A small convolutional encoder/decoder with a diagonal-Gaussian posterior,
trained with L1 reconstruction plus a lightly weighted KL term. Public
encode/decode work on single [H, W, 3] arrays in [0, 1]; batched tensor
paths exist for training and for the diffusion loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import CheckpointManifest, load_manifest, load_state, save_checkpoint
from .data import Manifest, load_image
from .seeding import seeded_init, torch_generator


@dataclass
class VaeConfig:
    latent_channels: int = 4
    downsample_factor: int = 4
    kl_weight: float = 1e-6
    base_width: int = 32

    def __post_init__(self):
        if self.downsample_factor < 1 or self.downsample_factor & (self.downsample_factor - 1):
            raise ValueError("downsample_factor must be a power of 2")


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over latents; sampling takes an explicit noise draw."""

    mean: np.ndarray
    log_variance: np.ndarray

    def sample(self, noise: np.ndarray) -> np.ndarray:
        return self.mean + np.exp(0.5 * self.log_variance) * noise


class Vae(nn.Module):
    def __init__(self, config: VaeConfig, seed: int = 0):
        super().__init__()
        self.config = config
        levels = int(math.log2(config.downsample_factor))
        w = config.base_width
        with seeded_init(seed, "vae"):
            enc: list[nn.Module] = [nn.Conv2d(3, w, 3, padding=1), nn.SiLU()]
            width = w
            for _ in range(levels):
                nxt = min(width * 2, 4 * w)
                enc += [
                    nn.Conv2d(width, nxt, 3, stride=2, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(nxt, nxt, 3, padding=1),
                    nn.SiLU(),
                ]
                width = nxt
            self.encoder = nn.Sequential(*enc)
            self.mean_head = nn.Conv2d(width, config.latent_channels, 1)
            self.logvar_head = nn.Conv2d(width, config.latent_channels, 1)

            dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, width, 3, padding=1), nn.SiLU()]
            for _ in range(levels):
                nxt = max(width // 2, w)
                dec += [
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, nxt, 3, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(nxt, nxt, 3, padding=1),
                    nn.SiLU(),
                ]
                width = nxt
            dec += [nn.Conv2d(width, 3, 3, padding=1)]
            self.decoder = nn.Sequential(*dec)

    def encode_batch(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: [B, 3, H, W] in [0, 1] -> (mean, logvar), each [B, c, h, w]."""
        f = self.config.downsample_factor
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] % f or x.shape[3] % f:
            raise ValueError(
                f"expected [B, 3, H, W] with H, W divisible by {f}, got {tuple(x.shape)}"
            )
        h = self.encoder(x)
        return self.mean_head(h), self.logvar_head(h).clamp(-10.0, 10.0)

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected [B, {self.config.latent_channels}, h, w], got {tuple(z.shape)}"
            )
        return torch.sigmoid(self.decoder(z))

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> LatentGaussian:
        """Deterministic posterior parameters for one [H, W, 3] image."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected [H, W, 3] image, got {image.shape}")
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        mean, logvar = self.encode_batch(x.permute(2, 0, 1).unsqueeze(0))
        to_hwc = lambda t: t.squeeze(0).permute(1, 2, 0).numpy()
        return LatentGaussian(mean=to_hwc(mean), log_variance=to_hwc(logvar))

    @torch.no_grad()
    def decode(self, z: np.ndarray) -> np.ndarray:
        """Decode one [h, w, c] latent to an [H, W, 3] image in [0, 1]."""
        c = self.config.latent_channels
        if z.ndim != 3 or z.shape[2] != c:
            raise ValueError(f"expected [h, w, {c}] latent, got {z.shape}")
        zt = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))
        out = self.decode_batch(zt.permute(2, 0, 1).unsqueeze(0))
        return out.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).numpy()


def vae_loss(
    model: Vae, x: torch.Tensor, noise: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction, kl): L1 over pixels + kl_weight * mean KL."""
    mean, logvar = model.encode_batch(x)
    z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise
    recon = model.decode_batch(z)
    rec = (recon - x).abs().mean()
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
    return rec + model.config.kl_weight * kl, rec, kl


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def images_from_manifest(manifest: Manifest, split: str, modality: str = "RGB") -> np.ndarray:
    records = manifest.select(split=split, modality=modality)
    if not records:
        raise ValueError(f"manifest has no {modality} records in split {split!r}")
    return np.stack([load_image(manifest.path_of(r)) for r in records])


def to_bchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


@dataclass
class VaeTrainConfig:
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0


def train_vae(
    manifest: Manifest,
    config: VaeConfig,
    train_config: VaeTrainConfig,
    out_dir: Path | str,
) -> CheckpointManifest:
    """Train the autoencoder on the RGB train split and write a checkpoint."""
    train = to_bchw(images_from_manifest(manifest, "train"))
    val = to_bchw(images_from_manifest(manifest, "val"))
    model = Vae(config, seed=train_config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    gen = torch_generator(train_config.seed, "vae-train")
    n = train.shape[0]
    history = []
    for epoch in range(train_config.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, train_config.batch_size):
            x = train[perm[start : start + train_config.batch_size]]
            noise_shape = (x.shape[0], config.latent_channels,
                           x.shape[2] // config.downsample_factor,
                           x.shape[3] // config.downsample_factor)
            noise = torch.randn(noise_shape, generator=gen)
            loss, rec, kl = vae_loss(model, x, noise)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"NaN/inf VAE loss at epoch {epoch} step {batches} "
                    f"(rec={rec.item()}, kl={kl.item()}, lr={train_config.lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        model.eval()
        with torch.no_grad():
            vm, _ = model.encode_batch(val)
            vrec = model.decode_batch(vm).clamp(0, 1)
            val_l1 = (vrec - val).abs().mean().item()
            val_psnr = psnr(vrec.numpy(), val.numpy())
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / batches,
             "val_l1": val_l1, "val_psnr": val_psnr}
        )
    with torch.no_grad():
        means, _ = model.encode_batch(val)
        channel_std = means.std(dim=(0, 2, 3)).tolist()
        latent_scale = 1.0 / max(float(means.std()), 1e-8)
    metrics = {
        "history": history,
        "val_psnr": history[-1]["val_psnr"],
        "latent_channel_std": channel_std,
        "latent_scale": latent_scale,
        "uses_posterior_mean_downstream": True,
    }
    return save_checkpoint(
        out_dir, "vae", model.state_dict(),
        config={"model": asdict(config), "train": asdict(train_config)},
        metrics=metrics,
    )


def load_vae(path: Path | str) -> tuple[Vae, CheckpointManifest]:
    manifest = load_manifest(path, produced_by="toyearth train vae")
    model = Vae(VaeConfig(**manifest.config["model"]))
    model.load_state_dict(load_state(path, produced_by="toyearth train vae"))
    model.eval()
    return model, manifest
