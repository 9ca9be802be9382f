"""Denoising network and its conditioning machinery.

The denoiser is a small U-Net over latents. Text enters through
cross-attention (queries from spatial features, keys/values from the
tokenwise text embedding); resolution and timestep enter as a summed
embedding added to every residual block after its first convolution; the
editing variant takes extra input channels carrying the masked-image
latent and a downsampled mask, concatenated in front of the noisy latent.

Learned null embeddings stand in for absent text or resolution conditions;
zero vectors would conflate "unknown" with a meaningful embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator

import contextlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import seeded_init


class NullCondition:
    """Marker for an absent condition, resolved to τ_∅/ρ_∅ before forward."""

    def __repr__(self):
        return "NULL_CONDITION"


NULL_CONDITION = NullCondition()


@dataclass
class DenoiserConfig:
    in_channels: int = 4
    latent_channels: int = 4
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_resolutions: tuple[int, ...] = (8, 4)
    res_blocks: int = 1
    embed_dim: int = 128
    text_dim: int = 128
    text_len: int = 32
    heads: int = 4
    max_timestep: int = 200

    @property
    def mask_channels(self) -> int:
        return self.in_channels - self.latent_channels

    @property
    def is_editor(self) -> bool:
        return self.in_channels > self.latent_channels


def editor_config(base: DenoiserConfig | None = None) -> DenoiserConfig:
    """Editing variant: masked-image latent (c) plus one mask channel."""
    cfg = base or DenoiserConfig()
    c = cfg.latent_channels
    return DenoiserConfig(**{**asdict(cfg), "in_channels": c + (c + 1)})


@dataclass
class ConditionBundle:
    tau: torch.Tensor | NullCondition
    rho: torch.Tensor | NullCondition
    timestep: int
    mask_latent: torch.Tensor | None = None


def sinusoidal_features(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos featurization of a scalar batch, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = values.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(cond)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial queries attending over tokenwise text embeddings."""

    def __init__(self, channels: int, text_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _norm(channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(text_dim, channels)
        self.to_v = nn.Linear(text_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        self._probe: list[torch.Tensor] | None = None

    def forward(self, x: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        heads = self.heads
        dk = c // heads
        q = self.to_q(self.norm(x)).reshape(b, heads, dk, h * w).transpose(-2, -1)
        k = self.to_k(tau).reshape(b, -1, heads, dk).transpose(1, 2)
        v = self.to_v(tau).reshape(b, -1, heads, dk).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dk), dim=-1)
        if self._probe is not None:
            self._probe.append(attn.detach().clone())
        out = (attn @ v).transpose(-2, -1).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """U-Net noise predictor; output always has latent_channels channels."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        e, d = config.embed_dim, config.text_dim
        with seeded_init(seed, "denoiser", config.in_channels):
            self.time_proj = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
            self.res_proj = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
            self.tau_null = nn.Parameter(torch.randn(config.text_len, d) * 0.02)
            self.rho_null = nn.Parameter(torch.randn(e) * 0.02)

            widths = [config.base_width * m for m in config.channel_multipliers]
            attn_at = set(config.attention_resolutions)
            self.conv_in = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

            self.down_res: nn.ModuleList = nn.ModuleList()
            self.down_attn: nn.ModuleList = nn.ModuleList()
            self.downsamples: nn.ModuleList = nn.ModuleList()
            res = 8  # latent grid for 32 px tiles
            ch = widths[0]
            skip_chs = [ch]
            for i, w in enumerate(widths):
                for _ in range(config.res_blocks):
                    self.down_res.append(ResBlock(ch, w, e))
                    self.down_attn.append(
                        CrossAttention(w, d, config.heads) if res in attn_at else nn.Identity()
                    )
                    ch = w
                    skip_chs.append(ch)
                if i < len(widths) - 1:
                    self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                    res //= 2
                    skip_chs.append(ch)
            self.mid_res1 = ResBlock(ch, ch, e)
            self.mid_attn = CrossAttention(ch, d, config.heads)
            self.mid_res2 = ResBlock(ch, ch, e)

            self.up_res: nn.ModuleList = nn.ModuleList()
            self.up_attn: nn.ModuleList = nn.ModuleList()
            self.upsamples: nn.ModuleList = nn.ModuleList()
            for i, w in reversed(list(enumerate(widths))):
                for _ in range(config.res_blocks + 1):
                    self.up_res.append(ResBlock(ch + skip_chs.pop(), w, e))
                    self.up_attn.append(
                        CrossAttention(w, d, config.heads) if res in attn_at else nn.Identity()
                    )
                    ch = w
                if i > 0:
                    self.upsamples.append(
                        nn.Sequential(
                            nn.Upsample(scale_factor=2, mode="nearest"),
                            nn.Conv2d(ch, ch, 3, padding=1),
                        )
                    )
                    res *= 2
            self.norm_out = _norm(ch)
            self.conv_out = nn.Conv2d(ch, config.latent_channels, 3, padding=1)
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
        self._call_count: list[int] | None = None

    # -- conditioning -------------------------------------------------------

    def timestep_features(self, t: torch.Tensor) -> torch.Tensor:
        bad = (t < 1) | (t > self.config.max_timestep)
        if bool(bad.any()):
            raise ValueError(
                f"timestep out of range [1, {self.config.max_timestep}]: {t[bad].tolist()}"
            )
        return self.time_proj(sinusoidal_features(t, self.config.embed_dim))

    def resolution_features(self, resolution: torch.Tensor) -> torch.Tensor:
        if bool((resolution <= 0).any()):
            raise ValueError(f"resolution must be positive m/px, got {resolution.tolist()}")
        # resolutions span a multiplicative range, so featurize log2; scale
        # spreads the handful of octaves across the sinusoid's useful range
        feat = torch.log2(resolution.float()) * 8.0
        return self.res_proj(sinusoidal_features(feat, self.config.embed_dim))

    def null_text(self, batch: int) -> torch.Tensor:
        return self.tau_null[None].expand(batch, -1, -1)

    def null_resolution(self, batch: int) -> torch.Tensor:
        return self.rho_null[None].expand(batch, -1)

    # -- forward ------------------------------------------------------------

    def forward(self, z_in: torch.Tensor, tau: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """z_in: [B, in_channels, h, w]; tau: [B, L, d]; cond: [B, e]."""
        if z_in.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {z_in.shape[1]}"
            )
        if self._call_count is not None:
            self._call_count[0] += 1
        h = self.conv_in(z_in)
        skips = [h]
        res_iter = iter(zip(self.down_res, self.down_attn))
        ds_iter = iter(self.downsamples)
        n_levels = len(self.config.channel_multipliers)
        for i in range(n_levels):
            for _ in range(self.config.res_blocks):
                block, attn = next(res_iter)
                h = block(h, cond)
                if not isinstance(attn, nn.Identity):
                    h = attn(h, tau)
                skips.append(h)
            if i < n_levels - 1:
                h = next(ds_iter)(h)
                skips.append(h)
        h = self.mid_res1(h, cond)
        h = self.mid_attn(h, tau)
        h = self.mid_res2(h, cond)
        up_iter = iter(zip(self.up_res, self.up_attn))
        us_iter = iter(self.upsamples)
        for i in reversed(range(n_levels)):
            for _ in range(self.config.res_blocks + 1):
                block, attn = next(up_iter)
                h = block(torch.cat([h, skips.pop()], dim=1), cond)
                if not isinstance(attn, nn.Identity):
                    h = attn(h, tau)
            if i > 0:
                h = next(us_iter)(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# Public conditioning operations (single-sample, array in / array out)
# ---------------------------------------------------------------------------


def timestep_embedding(model: Denoiser, t: int) -> np.ndarray:
    with torch.no_grad():
        return model.timestep_features(torch.tensor([int(t)]))[0].numpy()


def resolution_embedding(model: Denoiser, resolution_m_per_px: float) -> np.ndarray:
    with torch.no_grad():
        return model.resolution_features(torch.tensor([float(resolution_m_per_px)]))[0].numpy()


def combine_condition(rho: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    """c = rho + g(t), exactly elementwise."""
    rho, g_t = np.asarray(rho), np.asarray(g_t)
    if rho.shape != g_t.shape:
        raise ValueError(f"length mismatch: {rho.shape} vs {g_t.shape}")
    return rho + g_t

def null_conditions(model: Denoiser) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        return model.tau_null.numpy().copy(), model.rho_null.numpy().copy()


def concat_mask_condition(z_m: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    """Channel concat with frozen order [z_m | z_t] (mask block first)."""
    if z_m.shape[:2] != z_t.shape[:2]:
        raise ValueError(f"spatial mismatch: {z_m.shape[:2]} vs {z_t.shape[:2]}")
    return np.concatenate([z_m, z_t], axis=2)


def concat_mask_condition_t(z_m: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Batched tensor variant of the same frozen [z_m | z_t] channel order."""
    if z_m.shape[2:] != z_t.shape[2:]:
        raise ValueError(f"spatial mismatch: {tuple(z_m.shape[2:])} vs {tuple(z_t.shape[2:])}")
    return torch.cat([z_m, z_t], dim=1)


def resolve_bundle(model: Denoiser, bundle: ConditionBundle, batch: int = 1) -> ConditionBundle:
    """Replace NULL markers with the learned null embeddings."""
    tau = bundle.tau
    if isinstance(tau, NullCondition):
        tau = model.null_text(batch)
    rho = bundle.rho
    if isinstance(rho, NullCondition):
        rho = model.null_resolution(batch)
    return ConditionBundle(tau=tau, rho=rho, timestep=bundle.timestep,
                           mask_latent=bundle.mask_latent)


def predict_noise(model: Denoiser, z_in: np.ndarray, bundle: ConditionBundle) -> np.ndarray:
    """Single-sample noise prediction from an [h, w, ch] array."""
    if isinstance(bundle.tau, NullCondition) or isinstance(bundle.rho, NullCondition):
        raise ValueError("unresolved NULL-marker in condition bundle; call resolve_bundle first")
    z = torch.from_numpy(np.ascontiguousarray(z_in, dtype=np.float32)).permute(2, 0, 1)[None]
    if bundle.mask_latent is not None:
        zm = torch.as_tensor(np.asarray(bundle.mask_latent, dtype=np.float32)).permute(2, 0, 1)[None]
        z = concat_mask_condition_t(zm, z)
    tau = torch.as_tensor(bundle.tau, dtype=torch.float32)
    if tau.dim() == 2:
        tau = tau[None]
    rho = torch.as_tensor(bundle.rho, dtype=torch.float32)
    if rho.dim() == 1:
        rho = rho[None]
    with torch.no_grad():
        g = model.timestep_features(torch.tensor([bundle.timestep]))
        cond = rho + g
        out = model(z, tau, cond)
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# Read-only instrumentation hooks
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def attention_probe(model: Denoiser) -> Iterator[list[torch.Tensor]]:
    """Collect every cross-attention row-softmax emitted inside the block."""
    captured: list[torch.Tensor] = []
    mods = [m for m in model.modules() if isinstance(m, CrossAttention)]
    for m in mods:
        m._probe = captured
    try:
        yield captured
    finally:
        for m in mods:
            m._probe = None


@contextlib.contextmanager
def call_counter(model: Denoiser) -> Iterator[list[int]]:
    """Count denoiser forward passes (for the single-eval degeneracy check)."""
    counter = [0]
    model._call_count = counter
    try:
        yield counter
    finally:
        model._call_count = None
