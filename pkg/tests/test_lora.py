"""Tests for low-rank adapter injection, training and application."""

import numpy as np
import pytest
import torch

from toyearth.backbone import Denoiser
from toyearth.checkpoints import load_manifest
from toyearth.diffusion import DcaConfig, GuidanceConfig, load_pipeline, sample
from toyearth.lora import (
    LoraSpec,
    adapter_parameter_count,
    adapter_state,
    inject,
    load_adapted_pipeline,
    merge_adapter,
    train_adapter,
)

from conftest import MICRO_DENOISER


def fresh_model():
    model = Denoiser(MICRO_DENOISER, seed=42).eval()
    # the output conv is zero-initialized, which would hide any internal
    # perturbation; give it fixed non-zero weights so effects are observable
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        model.conv_out.weight.copy_(
            torch.randn(model.conv_out.weight.shape, generator=gen) * 0.05
        )
    return model


def random_inputs(seed=0):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(2, 4, 8, 8, generator=gen)
    tau = torch.randn(2, MICRO_DENOISER.text_len, MICRO_DENOISER.text_dim, generator=gen)
    cond = torch.randn(2, MICRO_DENOISER.embed_dim, generator=gen)
    return z, tau, cond


class TestInject:
    def test_zero_init_is_exact_noop(self):
        model = fresh_model()
        z, tau, cond = random_inputs()
        with torch.no_grad():
            before = model(z, tau, cond)
        inject(model, LoraSpec(rank=4))
        with torch.no_grad():
            after = model(z, tau, cond)
        assert torch.equal(before, after)

    def test_parameter_count_formula(self):
        model = fresh_model()
        spec = LoraSpec(rank=3)
        expected = adapter_parameter_count(model, spec)
        wrappers = inject(model, spec)
        actual = sum(w.lora_a.numel() + w.lora_b.numel() for _, w in wrappers)
        assert actual == expected
        w = MICRO_DENOISER.base_width
        # every attention projection is square (channels x channels)
        n_proj = len(wrappers)
        assert expected == sum(
            3 * (wr.lora_a.shape[1] + wr.lora_b.shape[0]) for _, wr in wrappers
        )
        assert n_proj % 4 == 0

    def test_base_frozen_after_injection(self):
        model = fresh_model()
        inject(model, LoraSpec())
        for name, p in model.named_parameters():
            if ".lora_" in name:
                assert p.requires_grad
            else:
                assert not p.requires_grad

    def test_double_injection_rejected(self):
        model = fresh_model()
        inject(model, LoraSpec())
        with pytest.raises(ValueError, match="already"):
            inject(model, LoraSpec())

    def test_invalid_rank_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            LoraSpec(rank=0)

    def test_unknown_selector_rejected(self):
        with pytest.raises(ValueError, match="selector"):
            inject(fresh_model(), LoraSpec(target_layers="mlp"))


class TestMergeEquivalence:
    def test_merged_and_runtime_outputs_agree(self):
        spec = LoraSpec(rank=2)
        runtime = fresh_model()
        wrappers = inject(runtime, spec, seed=7)
        with torch.no_grad():  # give the adapter a real effect
            for _, w in wrappers:
                w.lora_b.normal_(std=0.05)
        state = adapter_state(wrappers)

        merged = fresh_model()
        merge_adapter(merged, spec, state)
        z, tau, cond = random_inputs(3)
        with torch.no_grad():
            out_runtime = runtime(z, tau, cond)
            out_merged = merged(z, tau, cond)
        assert not torch.equal(out_merged, fresh_model()(z, tau, cond))
        assert torch.allclose(out_runtime, out_merged, atol=1e-5)

    def test_zero_adapter_merge_is_identity(self):
        spec = LoraSpec(rank=2)
        probe = fresh_model()
        wrappers = inject(probe, spec)
        state = adapter_state(wrappers)
        merged = merge_adapter(fresh_model(), spec, state)
        z, tau, cond = random_inputs(4)
        with torch.no_grad():
            assert torch.equal(merged(z, tau, cond), fresh_model()(z, tau, cond))


@pytest.fixture(scope="module")
def nir_adapter(micro_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("adapter")
    checkpoint = train_adapter(
        micro_run["manifest"], "NIR", LoraSpec(rank=4),
        DcaConfig(batch_size=16, epochs=2, learning_rate=2e-3, seed=0),
        micro_run["vae"], micro_run["textenc"], micro_run["generator"],
        out / "nir",
    )
    return out / "nir", checkpoint


class TestTrainAdapter:
    def test_smoke_run_writes_loadable_adapter(self, micro_run, nir_adapter):
        path, checkpoint = nir_adapter
        manifest = load_manifest(path)
        assert manifest.kind == "lora-adapter"
        assert manifest.metrics["modality"] == "NIR"
        pipeline = load_adapted_pipeline(
            micro_run["vae"], micro_run["textenc"], micro_run["generator"], path
        )
        img = sample(pipeline, "a dense forest", 1.0, GuidanceConfig(seed=1))
        assert img.shape == (32, 32, 3)

    def test_base_weights_byte_identical(self, nir_adapter):
        _, checkpoint = nir_adapter
        assert checkpoint.metrics["base_unchanged"] is True

    def test_missing_modality_rejected(self, micro_run, tmp_path):
        with pytest.raises(ValueError, match="PAN"):
            train_adapter(
                micro_run["manifest"], "PAN", LoraSpec(), DcaConfig(epochs=1),
                micro_run["vae"], micro_run["textenc"], micro_run["generator"],
                tmp_path / "x",
            )

    def test_hash_mismatch_refused(self, micro_run, nir_adapter):
        path, _ = nir_adapter
        with pytest.raises(ValueError, match="different base"):
            load_adapted_pipeline(
                micro_run["vae"], micro_run["textenc"], micro_run["editor"], path
            )

    def test_merge_and_runtime_application_agree(self, micro_run, nir_adapter):
        path, _ = nir_adapter
        merged = load_adapted_pipeline(
            micro_run["vae"], micro_run["textenc"], micro_run["generator"], path, merge=True
        )
        runtime = load_adapted_pipeline(
            micro_run["vae"], micro_run["textenc"], micro_run["generator"], path, merge=False
        )
        a = sample(merged, "a dense forest", 1.0, GuidanceConfig(seed=2))
        b = sample(runtime, "a dense forest", 1.0, GuidanceConfig(seed=2))
        np.testing.assert_allclose(a, b, atol=1e-5)
