"""Shared fixtures: a tiny dataset plus micro-scale trained checkpoints.

The micro pipeline is deliberately undertrained; it exists so integration
tests can exercise real checkpoint loading, sampling and editing quickly.
Quality-bearing assertions live in the acceptance suite, which trains the
full desk-scale pipeline.
"""

from dataclasses import replace

import pytest

import toyearth.data as D
from toyearth.backbone import DenoiserConfig, editor_config
from toyearth.diffusion import DcaConfig, ScheduleParams, train_dca
from toyearth.textenc import ContrastiveTrainConfig, TextEncConfig, train_contrastive
from toyearth.vae import VaeConfig, VaeTrainConfig, train_vae

MICRO_T = 30

MICRO_DENOISER = DenoiserConfig(
    base_width=16,
    channel_multipliers=(1, 2),
    attention_resolutions=(8, 4),
    embed_dim=32,
    text_dim=32,
    heads=2,
    max_timestep=MICRO_T,
)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro_run")
    manifest = D.build_dataset(
        D.BuildConfig(
            n_train=48, n_val=12, n_test=12, global_seed=77,
            out_dir=str(root / "data"), modalities=("RGB", "NIR"),
        )
    )
    train_vae(
        manifest, VaeConfig(base_width=8),
        VaeTrainConfig(epochs=3, batch_size=16, seed=0), root / "vae",
    )
    train_contrastive(
        manifest, TextEncConfig(embed_dim=32, layers=1, heads=2, image_width=8),
        ContrastiveTrainConfig(epochs=2, batch_size=16, seed=0), root / "textenc",
    )
    schedule = ScheduleParams(T=MICRO_T)
    train_dca(
        manifest, DcaConfig(batch_size=16, epochs=3, learning_rate=1e-3, seed=0),
        "generator", root / "vae", root / "textenc", root / "generator",
        denoiser_config=MICRO_DENOISER, schedule_params=schedule,
    )
    train_dca(
        manifest, DcaConfig(batch_size=16, epochs=3, learning_rate=1e-3, seed=0),
        "editor", root / "vae", root / "textenc", root / "editor",
        denoiser_config=editor_config(MICRO_DENOISER), schedule_params=schedule,
    )
    return {
        "root": root,
        "manifest": manifest,
        "vae": root / "vae",
        "textenc": root / "textenc",
        "generator": root / "generator",
        "editor": root / "editor",
    }
