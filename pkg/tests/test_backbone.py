"""Tests for the denoiser and its conditioning operations."""

import numpy as np
import pytest
import torch

from toyearth.backbone import (
    NULL_CONDITION,
    ConditionBundle,
    Denoiser,
    DenoiserConfig,
    attention_probe,
    call_counter,
    combine_condition,
    concat_mask_condition,
    editor_config,
    null_conditions,
    predict_noise,
    resolution_embedding,
    resolve_bundle,
    sinusoidal_features,
    timestep_embedding,
)

MICRO = DenoiserConfig(base_width=8, embed_dim=16, text_dim=16, text_len=4, heads=2)


@pytest.fixture(scope="module")
def model():
    return Denoiser(MICRO, seed=3).eval()


@pytest.fixture(scope="module")
def sensitive_model():
    """Micro model nudged off its zero-initialized output head, so
    predictions actually depend on the conditioning inputs."""
    m = Denoiser(MICRO, seed=4)
    opt = torch.optim.Adam(m.parameters(), lr=1e-2)
    gen = torch.Generator().manual_seed(0)
    for _ in range(3):
        z = torch.randn(4, 4, 8, 8, generator=gen)
        eps = torch.randn(4, 4, 8, 8, generator=gen)
        tau = torch.randn(4, MICRO.text_len, MICRO.text_dim, generator=gen)
        cond = torch.randn(4, MICRO.embed_dim, generator=gen)
        loss = (eps - m(z, tau, cond)).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return m.eval()


def random_latent(seed=0, channels=4):
    return np.random.default_rng(seed).standard_normal((8, 8, channels)).astype(np.float32)


def resolved(model, t=5, mask_latent=None):
    return resolve_bundle(
        model, ConditionBundle(NULL_CONDITION, NULL_CONDITION, t, mask_latent), batch=1
    )


class TestTimestepEmbedding:
    def test_deterministic_and_sized(self, model):
        a = timestep_embedding(model, 1)
        b = timestep_embedding(model, 1)
        assert np.array_equal(a, b)
        assert a.shape == (MICRO.embed_dim,)

    def test_distinct_timesteps_differ(self, model):
        g1 = timestep_embedding(model, 1)
        g2 = timestep_embedding(model, 2)
        assert np.linalg.norm(g1 - g2) > 0

    def test_out_of_range_rejected(self, model):
        for t in (0, MICRO.max_timestep + 1):
            with pytest.raises(ValueError, match="timestep"):
                timestep_embedding(model, t)


class TestResolutionEmbedding:
    def test_deterministic(self, model):
        assert np.array_equal(
            resolution_embedding(model, 2.0), resolution_embedding(model, 2.0)
        )

    def test_resolution_one_is_projection_of_zero_features(self, model):
        rho = resolution_embedding(model, 1.0)
        with torch.no_grad():
            zero_feat = sinusoidal_features(torch.zeros(1), MICRO.embed_dim)
            expected = model.res_proj(zero_feat)[0].numpy()
        np.testing.assert_allclose(rho, expected, atol=1e-7)

    def test_distinct_resolutions_distinct_embeddings(self, model):
        embs = [resolution_embedding(model, r) for r in (0.5, 1.0, 2.0)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(embs[i] - embs[j]) > 1e-6

    def test_non_positive_rejected(self, model):
        with pytest.raises(ValueError, match="positive"):
            resolution_embedding(model, 0.0)


class TestCombineCondition:
    def test_zero_rho_is_identity(self):
        g = np.arange(4.0)
        np.testing.assert_array_equal(combine_condition(np.zeros(4), g), g)

    def test_commutative_and_exact(self):
        rho, g = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        np.testing.assert_array_equal(combine_condition(rho, g), [4.0, 6.0])
        np.testing.assert_array_equal(combine_condition(rho, g), combine_condition(g, rho))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            combine_condition(np.zeros(3), np.zeros(4))


class TestNullConditions:
    def test_stable_and_shaped(self, model):
        tau1, rho1 = null_conditions(model)
        tau2, rho2 = null_conditions(model)
        assert np.array_equal(tau1, tau2) and np.array_equal(rho1, rho2)
        assert tau1.shape == (MICRO.text_len, MICRO.text_dim)
        assert rho1.shape == (MICRO.embed_dim,)

    def test_null_prediction_differs_from_conditioned(self, sensitive_model):
        model = sensitive_model
        z = random_latent(1)
        base = predict_noise(model, z, resolved(model))
        rng = np.random.default_rng(2)
        tau = rng.standard_normal((MICRO.text_len, MICRO.text_dim)).astype(np.float32)
        rho = resolution_embedding(model, 1.0)
        other = predict_noise(model, z, ConditionBundle(tau, rho, 5))
        assert np.linalg.norm(base - other) > 0


class TestConcatMask:
    def test_channel_arithmetic_and_order(self):
        z_m = np.random.default_rng(0).standard_normal((8, 8, 5)).astype(np.float32)
        z_t = random_latent(1)
        joint = concat_mask_condition(z_m, z_t)
        assert joint.shape == (8, 8, 9)
        assert np.array_equal(joint[..., :5], z_m)
        assert np.array_equal(joint[..., 5:], z_t)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            concat_mask_condition(np.zeros((8, 8, 5)), np.zeros((4, 4, 4)))

    def test_editor_accepts_concatenated_input(self):
        cfg = editor_config(MICRO)
        editor = Denoiser(cfg, seed=1).eval()
        z_m = np.zeros((8, 8, 5), dtype=np.float32)
        out = predict_noise(editor, random_latent(), resolved(editor, mask_latent=z_m))
        assert out.shape == (8, 8, 4)


class TestPredictNoise:
    def test_deterministic_and_shaped(self, model):
        z = random_latent(3)
        bundle = resolved(model)
        a = predict_noise(model, z, bundle)
        b = predict_noise(model, z, bundle)
        assert np.array_equal(a, b)
        assert a.shape == (8, 8, 4)

    def test_unresolved_null_marker_rejected(self, model):
        with pytest.raises(ValueError, match="NULL"):
            predict_noise(model, random_latent(), ConditionBundle(NULL_CONDITION, NULL_CONDITION, 5))

    def test_channel_mismatch_rejected(self, model):
        with pytest.raises(ValueError, match="channels"):
            predict_noise(model, random_latent(channels=6), resolved(model))

    def test_attention_rows_sum_to_one(self, model):
        with attention_probe(model) as probs:
            predict_noise(model, random_latent(4), resolved(model))
        assert len(probs) > 0
        for p in probs:
            sums = p.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_swapping_tau_changes_prediction(self, sensitive_model):
        model = sensitive_model
        z = random_latent(5)
        rho = resolution_embedding(model, 1.0)
        rng = np.random.default_rng(0)
        tau_a = rng.standard_normal((MICRO.text_len, MICRO.text_dim)).astype(np.float32)
        tau_b = rng.standard_normal((MICRO.text_len, MICRO.text_dim)).astype(np.float32)
        out_a = predict_noise(model, z, ConditionBundle(tau_a, rho, 7))
        out_b = predict_noise(model, z, ConditionBundle(tau_b, rho, 7))
        assert np.linalg.norm(out_a - out_b) > 0

    def test_call_counter_counts(self, model):
        with call_counter(model) as calls:
            predict_noise(model, random_latent(), resolved(model))
            predict_noise(model, random_latent(), resolved(model))
        assert calls[0] == 2

    def test_editor_parity_no_nan(self):
        editor = Denoiser(editor_config(MICRO), seed=9).eval()
        z_m = np.zeros((8, 8, 5), dtype=np.float32)
        z_m[..., 4] = 1.0
        out = predict_noise(editor, random_latent(8), resolved(editor, mask_latent=z_m))
        assert np.isfinite(out).all()


class TestGradientCheck:
    def test_loss_gradients_match_finite_differences(self):
        cfg = DenoiserConfig(
            base_width=8, channel_multipliers=(1,), res_blocks=1,
            embed_dim=8, text_dim=8, text_len=2, heads=2,
        )
        model = Denoiser(cfg, seed=11).double()
        with torch.no_grad():  # zero-init output head would block upstream grads
            torch.nn.init.normal_(model.conv_out.weight, std=0.05)
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64)
        tau = torch.randn(1, 2, 8, generator=gen, dtype=torch.float64)
        cond = torch.randn(1, 8, generator=gen, dtype=torch.float64)

        def loss_value():
            return (eps - model(z, tau, cond)).pow(2).mean()

        loss = loss_value()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None and p.grad.abs().max() > 0]
        rng = np.random.default_rng(5)
        h = 1e-6
        for _ in range(10):
            p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape)
            analytic = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_value().item()
                p[idx] = orig - h
                down = loss_value().item()
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(numeric), 1e-10)
            assert abs(analytic - numeric) / denom < 1e-3
