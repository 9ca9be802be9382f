"""Noise schedule, dynamic-condition training and guided sampling.

Training draws per-sample timesteps and noise, and independently drops the
text and resolution conditions with configured probabilities, replacing
them with the learned null embeddings. Sampling runs the full reverse
chain; at every step the final noise estimate blends a conditioned and a
null-conditioned prediction:

    eps_g = (1 + omega) * eps(z_t, t, tau, rho) - omega * eps(z_t, t, null, null)

When both conditions are absent the two predictions coincide, so the loop
detects that case and evaluates the network once per step.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.ndimage
import torch

from .backbone import (
    Denoiser,
    DenoiserConfig,
    concat_mask_condition_t,
    editor_config,
)
from .checkpoints import (
    CheckpointManifest,
    load_manifest,
    load_state,
    save_checkpoint,
)
from .data import Manifest, load_image
from .seeding import derive_seed, rng as np_rng, torch_generator
from .textenc import DualEncoder, Tokenizer, load_textenc, _tokenize_all
from .vae import Vae, images_from_manifest, load_vae, to_bchw

ProgressCallback = Callable[[int, int], None]


# ---------------------------------------------------------------------------
# Schedule and the elementary update formulas
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Per-timestep corruption tables; index with 1-based t via the accessors."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self.check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self.check_t(t) - 1])


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with running-product cumulative alphas."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def forward_noise(z0, t: int, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; caller supplies eps."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    ab = schedule.alpha_bar_at(t)
    return (ab ** 0.5) * z0 + ((1.0 - ab) ** 0.5) * eps


def guided_noise(eps_cond, eps_null, omega: float):
    """eps_g = (1 + omega) eps_cond - omega eps_null.

    Computed as eps_cond + omega * (eps_cond - eps_null), which is the same
    expression but keeps the omega = 0 and eps_cond = eps_null identities
    exact in floating point.
    """
    if tuple(eps_cond.shape) != tuple(eps_null.shape):
        raise ValueError(
            f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_null.shape)}"
        )
    return eps_cond + omega * (eps_cond - eps_null)


def denoise_step(z_t, t: int, eps_g, schedule: NoiseSchedule, noise_draw):
    """One reverse step; noise_draw must be 0 at t = 1."""
    t = schedule.check_t(t)
    scalar_zero = isinstance(noise_draw, (int, float)) and noise_draw == 0
    if t == 1 and not scalar_zero:
        if not float(np.max(np.abs(np.asarray(noise_draw)))) == 0.0:
            raise ValueError("noise_draw must be 0 at t = 1")
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    mean = (z_t - ((1.0 - a) / (1.0 - ab) ** 0.5) * eps_g) / a ** 0.5
    if scalar_zero:
        return mean
    return mean + schedule.sigma_at(t) * noise_draw


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class DcaConfig:
    p1: float = 0.1  # text drop probability
    p2: float = 0.1  # resolution drop probability
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 4
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p1 <= 1.0 and 0.0 <= self.p2 <= 1.0):
            raise ValueError(f"drop probabilities must lie in [0, 1]: p1={self.p1} p2={self.p2}")


@dataclass
class GuidanceConfig:
    omega: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")


@dataclass
class ScheduleParams:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


MASK_FILL = 1.0  # cosmetic fill for display windows (mask = white region)


def fill_masked(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Continuation fill: masked pixels take the nearest known pixel's value.

    This is what gets encoded into the context latent z_m; a constant fill
    would bleed into boundary latents and corrupt the context right where
    edits must blend. Fully masked images fall back to mid-gray.
    """
    mask = np.asarray(mask) > 0.5
    if not mask.any():
        return image.copy()
    if mask.all():
        return np.full_like(image, 0.5)
    _, (iy, ix) = scipy.ndimage.distance_transform_edt(mask, return_indices=True)
    return image[iy, ix]


def random_training_mask(r: np.random.Generator, size: int) -> np.ndarray:
    """Editing-data mask: rectangles/ellipses, 25% full-frame."""
    mask = np.zeros((size, size), dtype=np.float32)
    kind = r.random()
    if kind < 0.25:
        mask[:] = 1.0
        return mask
    w = int(r.integers(size // 4, 3 * size // 4 + 1))
    h = int(r.integers(size // 4, 3 * size // 4 + 1))
    y = int(r.integers(0, size - h + 1))
    x = int(r.integers(0, size - w + 1))
    if kind < 0.625:
        mask[y : y + h, x : x + w] = 1.0
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = y + h / 2, x + w / 2
        mask[((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0] = 1.0
    return mask


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour reduction to the latent grid."""
    return np.ascontiguousarray(mask[::factor, ::factor], dtype=np.float32)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainState:
    """Mutable bundle passed through training steps."""

    def __init__(
        self,
        denoiser: Denoiser,
        optimizer: torch.optim.Optimizer,
        vae: Vae,
        text_model: DualEncoder,
        tokenizer: Tokenizer,
        schedule: NoiseSchedule,
        latent_scale: float,
    ):
        self.denoiser = denoiser
        self.optimizer = optimizer
        self.vae = vae
        self.text_model = text_model
        self.tokenizer = tokenizer
        self.schedule = schedule
        self.latent_scale = latent_scale
        self.tau_cache: dict[str, torch.Tensor] = {}

    @property
    def variant(self) -> str:
        return "editor" if self.denoiser.config.is_editor else "generator"

    def embed_captions(self, captions: list[str]) -> torch.Tensor:
        missing = [c for c in captions if c not in self.tau_cache]
        if missing:
            ids, masks = _tokenize_all(self.tokenizer, missing)
            with torch.no_grad():
                tokenwise, _ = self.text_model.text(ids, masks)
            for c, tw in zip(missing, tokenwise):
                self.tau_cache[c] = tw
        return torch.stack([self.tau_cache[c] for c in captions])

    @torch.no_grad()
    def encode_images(self, images: np.ndarray) -> torch.Tensor:
        mean, _ = self.vae.encode_batch(to_bchw(images))
        return mean * self.latent_scale

    @torch.no_grad()
    def mask_latents(self, images: np.ndarray, masks: np.ndarray) -> torch.Tensor:
        """[z_m] block: encoded continuation-filled image + downsampled mask."""
        filled = np.stack([fill_masked(img, m) for img, m in zip(images, masks)])
        enc = self.encode_images(filled.astype(np.float32))
        f = self.vae.config.downsample_factor
        small = np.stack([downsample_mask(m, f) for m in masks])
        return torch.cat([enc, torch.from_numpy(small)[:, None]], dim=1)


def _batch_conditions(
    state: TrainState,
    captions: list[str],
    resolutions: list[float],
    drop_text: np.ndarray,
    drop_res: np.ndarray,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample conditions; dropped rows reference the learned null
    parameters directly so they keep receiving gradients."""
    model = state.denoiser
    cached = state.embed_captions(captions)
    tau = torch.stack(
        [model.tau_null if drop_text[i] else cached[i] for i in range(len(captions))]
    )
    real = model.resolution_features(torch.tensor(resolutions, dtype=torch.float32))
    rho = torch.stack(
        [model.rho_null if drop_res[i] else real[i] for i in range(len(captions))]
    )
    return tau, rho


def training_step(
    state: TrainState,
    batch: list[tuple[np.ndarray, str, float, np.ndarray | None]],
    config: DcaConfig,
    rng: np.random.Generator,
    probe: Callable[[dict], None] | None = None,
) -> float:
    """One optimizer step of dynamic-condition training; returns the loss."""
    images = np.stack([b[0] for b in batch])
    captions = [b[1] for b in batch]
    resolutions = [float(b[2]) for b in batch]
    n = len(batch)
    schedule = state.schedule

    z0 = state.encode_images(images)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
    drop_text = rng.random(n) < config.p1
    drop_res = rng.random(n) < config.p2
    if probe is not None:
        probe({"text_dropped": drop_text.tolist(), "res_dropped": drop_res.tolist(),
               "timesteps": t.tolist()})

    ab = torch.from_numpy(schedule.alpha_bar[t - 1].astype(np.float32))[:, None, None, None]
    z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps

    model = state.denoiser
    tau, rho = _batch_conditions(state, captions, resolutions, drop_text, drop_res)
    g_t = model.timestep_features(torch.from_numpy(t))
    cond = rho + g_t

    if state.variant == "editor":
        masks = np.stack(
            [b[3] if b[3] is not None else random_training_mask(rng, images.shape[1])
             for b in batch]
        )
        z_in = concat_mask_condition_t(state.mask_latents(images, masks), z_t)
    else:
        z_in = z_t

    pred = model(z_in, tau, cond)
    loss = torch.nn.functional.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"NaN/inf diffusion loss (variant={state.variant}, "
            f"t={t.tolist()[:8]}, lr={config.learning_rate})"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return float(loss.item())


def _smooth(values: list[float], window: int = 50) -> list[float]:
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


def train_dca(
    manifest: Manifest,
    config: DcaConfig,
    variant: str,
    vae_dir: Path | str,
    textenc_dir: Path | str,
    out_dir: Path | str,
    denoiser_config: DenoiserConfig | None = None,
    schedule_params: ScheduleParams | None = None,
    modality: str = "RGB",
) -> CheckpointManifest:
    """Full training loop for the generator or editor variant."""
    if variant not in ("generator", "editor"):
        raise ValueError(f"variant must be 'generator' or 'editor', got {variant!r}")
    vae, vae_manifest = load_vae(vae_dir)
    text_model, tokenizer, text_manifest = load_textenc(textenc_dir)
    schedule_params = schedule_params or ScheduleParams()
    schedule = schedule_params.build()

    if denoiser_config is None:
        denoiser_config = DenoiserConfig() if variant == "generator" else editor_config()
        denoiser_config = DenoiserConfig(**{**asdict(denoiser_config),
                                            "max_timestep": schedule.T})
    if variant == "editor" and not denoiser_config.is_editor:
        raise ValueError("editor variant needs in_channels > latent_channels")

    records = manifest.select(split="train", modality=modality)
    if not records:
        raise ValueError(f"manifest has no {modality} records in split 'train'")
    images = images_from_manifest(manifest, "train", modality=modality)
    captions = [r.caption for r in records]
    resolutions = [r.resolution_m_per_px for r in records]

    model = Denoiser(denoiser_config, seed=derive_seed(config.seed, "denoiser", variant))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    latent_scale = float(vae_manifest.metrics.get("latent_scale", 1.0))
    state = TrainState(model, opt, vae, text_model, tokenizer, schedule, latent_scale)

    gen = torch_generator(config.seed, "dca-order", variant)
    step_rng = np_rng(config.seed, "dca-steps", variant)
    n = len(records)
    losses: list[float] = []
    val_history: list[dict] = []
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, config.batch_size):
            sel = perm[start : start + config.batch_size]
            batch = [(images[i], captions[i], resolutions[i], None) for i in sel]
            losses.append(training_step(state, batch, config, step_rng))
        val_history.append(
            {"epoch": epoch, "val_loss": _validation_loss(state, manifest, modality)}
        )

    smoothed = _smooth(losses)
    metrics = {
        "steps": len(losses),
        "loss_first": losses[0],
        "loss_last": losses[-1],
        "smoothed_first": smoothed[min(49, len(smoothed) - 1)],
        "smoothed_last": smoothed[-1],
        "val_history": val_history,
        "latent_scale": latent_scale,
        "in_channels": denoiser_config.in_channels,
        "variant": variant,
    }
    return save_checkpoint(
        out_dir, f"denoiser-{variant}", model.state_dict(),
        config={
            "model": asdict(denoiser_config),
            "train": asdict(config),
            "schedule": asdict(schedule_params),
            "modality": modality,
        },
        metrics=metrics,
        dependencies={"vae": vae_manifest.content_hash, "textenc": text_manifest.content_hash},
    )


@torch.no_grad()
def _validation_loss(state: TrainState, manifest: Manifest, modality: str, limit: int = 128) -> float:
    """Loss on a fixed validation batch with fixed draws and no drops."""
    records = manifest.select(split="val", modality=modality)[:limit]
    if not records:
        return float("nan")
    images = np.stack([load_image(manifest.path_of(r)) for r in records])
    z0 = state.encode_images(images)
    r = np_rng(1234, "dca-val")
    t = r.integers(1, state.schedule.T + 1, size=len(records))
    eps = torch.from_numpy(r.standard_normal(z0.shape).astype(np.float32))
    ab = torch.from_numpy(state.schedule.alpha_bar[t - 1].astype(np.float32))[:, None, None, None]
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    tau = state.embed_captions([rec.caption for rec in records])
    rho = state.denoiser.resolution_features(
        torch.tensor([rec.resolution_m_per_px for rec in records])
    )
    cond = rho + state.denoiser.timestep_features(torch.from_numpy(t))
    if state.variant == "editor":
        masks = np.stack(
            [random_training_mask(np_rng(1234, "dca-val-mask", i), images.shape[1])
             for i in range(len(records))]
        )
        z_in = concat_mask_condition_t(state.mask_latents(images, masks), z_t)
    else:
        z_in = z_t
    pred = state.denoiser(z_in, tau, cond)
    return float(torch.nn.functional.mse_loss(pred, eps).item())


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class Pipeline:
    """Frozen models plus schedule, ready for sampling."""

    denoiser: Denoiser
    vae: Vae
    text_model: DualEncoder
    tokenizer: Tokenizer
    schedule: NoiseSchedule
    latent_scale: float
    variant: str
    checkpoint_hash: str
    dependency_hashes: dict[str, str] = field(default_factory=dict)

    @property
    def tile_px(self) -> int:
        return 8 * self.vae.config.downsample_factor

    def embed_prompt(self, text: str) -> torch.Tensor:
        ids, masks = _tokenize_all(self.tokenizer, [text])
        with torch.no_grad():
            tokenwise, _ = self.text_model.text(ids, masks)
        return tokenwise[0]


def load_pipeline(
    vae_dir: Path | str, textenc_dir: Path | str, denoiser_dir: Path | str
) -> Pipeline:
    vae, vae_manifest = load_vae(vae_dir)
    text_model, tokenizer, _ = load_textenc(textenc_dir)
    manifest = load_manifest(denoiser_dir, produced_by="toyearth train diffusion")
    config = DenoiserConfig(**{
        **manifest.config["model"],
        "channel_multipliers": tuple(manifest.config["model"]["channel_multipliers"]),
        "attention_resolutions": tuple(manifest.config["model"]["attention_resolutions"]),
    })
    model = Denoiser(config)
    model.load_state_dict(load_state(denoiser_dir, produced_by="toyearth train diffusion"))
    model.eval()
    schedule = ScheduleParams(**manifest.config["schedule"]).build()
    return Pipeline(
        denoiser=model,
        vae=vae,
        text_model=text_model,
        tokenizer=tokenizer,
        schedule=schedule,
        latent_scale=float(manifest.metrics.get("latent_scale", 1.0)),
        variant=manifest.metrics.get("variant", "generator"),
        checkpoint_hash=manifest.content_hash,
        dependency_hashes=dict(manifest.dependencies),
    )


@torch.no_grad()
def _sample_latents(
    pipeline: Pipeline,
    texts: list[str | None],
    resolutions: list[float | None],
    seeds: list[int],
    omega: float,
    z_m: torch.Tensor | None = None,
    progress: ProgressCallback | None = None,
) -> torch.Tensor:
    """Reverse chain for a batch; per-sample noise streams keyed by seed.

    When editing (z_m given), the known region of z is re-synchronized to
    the appropriately noised context latent after every step. Training
    always noised the full true latent, so the network only ever saw z_t
    consistent with z_m on unmasked pixels; resynchronizing keeps sampling
    on that distribution and is what makes edits blend into their context.
    """
    model = pipeline.denoiser
    schedule = pipeline.schedule
    n = len(seeds)
    c = model.config.latent_channels
    grid = pipeline.tile_px // pipeline.vae.config.downsample_factor
    rngs = [np_rng(s, "sample") for s in seeds]

    def fresh_noise() -> torch.Tensor:
        return torch.from_numpy(
            np.stack([r.standard_normal((c, grid, grid)).astype(np.float32) for r in rngs])
        )

    z = fresh_noise()
    known_latent = known_keep = None
    if z_m is not None:
        known_latent = z_m[:, :c]
        known_keep = 1.0 - z_m[:, c : c + 1]  # 1 where context is known

    text_missing = [t is None for t in texts]
    res_missing = [r is None for r in resolutions]
    taus = torch.stack(
        [model.tau_null if m else pipeline.embed_prompt(t) for t, m in zip(texts, text_missing)]
    )
    rho_rows = []
    for r_value, missing in zip(resolutions, res_missing):
        if missing:
            rho_rows.append(model.rho_null)
        else:
            rho_rows.append(model.resolution_features(torch.tensor([float(r_value)]))[0])
    rhos = torch.stack(rho_rows)
    all_null = all(text_missing) and all(res_missing)

    for step_index, t in enumerate(range(schedule.T, 0, -1)):
        g_t = model.timestep_features(torch.full((n,), t, dtype=torch.long))
        z_in = z if z_m is None else concat_mask_condition_t(z_m, z)
        eps_cond = model(z_in, taus, rhos + g_t)
        if all_null:
            eps_null = eps_cond
        else:
            null_tau = model.null_text(n)
            null_rho = model.null_resolution(n)
            eps_null = model(z_in, null_tau, null_rho + g_t)
        eps_g = guided_noise(eps_cond, eps_null, omega)
        if t > 1:
            z = denoise_step(z, t, eps_g, schedule, fresh_noise())
        else:
            z = denoise_step(z, t, eps_g, schedule, 0)
        if known_latent is not None:
            if t > 1:
                known_t = forward_noise(known_latent, t - 1, fresh_noise(), schedule)
            else:
                known_t = known_latent
            z = known_keep * known_t + (1.0 - known_keep) * z
        if progress is not None:
            progress(step_index, t)
    return z


@torch.no_grad()
def sample_batch(
    pipeline: Pipeline,
    texts: list[str | None],
    resolutions: list[float | None],
    seeds: list[int],
    omega: float = 3.0,
    mask_latent: torch.Tensor | None = None,
    progress: ProgressCallback | None = None,
) -> np.ndarray:
    """Batched generation; returns [B, H, W, 3] images in [0, 1]."""
    z = _sample_latents(pipeline, texts, resolutions, seeds, omega, mask_latent, progress)
    images = pipeline.vae.decode_batch(z / pipeline.latent_scale).clamp(0.0, 1.0)
    return images.permute(0, 2, 3, 1).numpy()


def sample(
    pipeline: Pipeline,
    text: str | None = None,
    resolution: float | None = None,
    guidance: GuidanceConfig | None = None,
    mask_inputs: tuple[np.ndarray, np.ndarray] | None = None,
    progress: ProgressCallback | None = None,
) -> np.ndarray:
    """Generate one image; pure function of (checkpoints, inputs, seed)."""
    guidance = guidance or GuidanceConfig()
    if pipeline.variant == "editor":
        if mask_inputs is None:
            raise ValueError("editor pipeline requires mask_inputs=(image, mask)")
        return inpaint(pipeline, mask_inputs[0], mask_inputs[1], text, resolution, guidance,
                       progress=progress)
    if mask_inputs is not None:
        raise ValueError("mask_inputs is only valid for the editor variant")
    return sample_batch(
        pipeline, [text], [resolution], [guidance.seed], guidance.omega, progress=progress
    )[0]


def _mask_latent_for(pipeline: Pipeline, image: np.ndarray, mask: np.ndarray) -> torch.Tensor:
    filled = fill_masked(image, mask)
    mean, _ = pipeline.vae.encode_batch(to_bchw(filled.astype(np.float32)[None]))
    enc = mean * pipeline.latent_scale
    small = downsample_mask(mask, pipeline.vae.config.downsample_factor)
    return torch.cat([enc, torch.from_numpy(small)[None, None]], dim=1)


def inpaint_raw(
    pipeline: Pipeline,
    image: np.ndarray,
    mask: np.ndarray,
    text: str | None = None,
    resolution: float | None = None,
    guidance: GuidanceConfig | None = None,
    progress: ProgressCallback | None = None,
) -> np.ndarray:
    """Full decoded window before the unmasked-pixel paste.

    The known half of this output is the model's own rendering of the
    context, so its gradients continue coherently across the mask boundary;
    compositing code needs that raw field.
    """
    guidance = guidance or GuidanceConfig()
    if pipeline.variant != "editor":
        raise ValueError("inpaint requires an editor pipeline")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    mask = (np.asarray(mask) > 0.5).astype(np.float32)
    z_m = _mask_latent_for(pipeline, image, mask)
    return sample_batch(
        pipeline, [text], [resolution], [guidance.seed], guidance.omega,
        mask_latent=z_m, progress=progress,
    )[0]


def inpaint(
    pipeline: Pipeline,
    image: np.ndarray,
    mask: np.ndarray,
    text: str | None = None,
    resolution: float | None = None,
    guidance: GuidanceConfig | None = None,
    progress: ProgressCallback | None = None,
) -> np.ndarray:
    """Regenerate the masked region (mask 1 = generate); unmasked pixels of
    the input are pasted back verbatim after decoding."""
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    binary = (np.asarray(mask) > 0.5).astype(np.float32)
    if not binary.any():
        return image.copy()
    out = inpaint_raw(pipeline, image, binary, text, resolution, guidance, progress)
    m3 = binary[..., None]
    return (image * (1.0 - m3) + out * m3).astype(np.float32)
