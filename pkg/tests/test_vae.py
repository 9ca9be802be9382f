"""Tests for the compression autoencoder."""

import numpy as np
import pytest
import torch

import toyearth.data as D
from toyearth.vae import (
    LatentGaussian,
    Vae,
    VaeConfig,
    VaeTrainConfig,
    load_vae,
    psnr,
    train_vae,
    vae_loss,
)


@pytest.fixture(scope="module")
def vae():
    return Vae(VaeConfig(), seed=1).eval()


class TestShapes:
    def test_encode_shape(self, vae):
        img = D.render_tile(D.sample_spec(1))
        lat = vae.encode(img)
        assert lat.mean.shape == (8, 8, 4)
        assert lat.log_variance.shape == (8, 8, 4)
        assert np.isfinite(lat.log_variance).all()

    def test_decode_shape_and_range(self, vae):
        out = vae.decode(np.zeros((8, 8, 4), dtype=np.float32))
        assert out.shape == (32, 32, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_compression_ratio_exact(self, vae):
        img = D.render_tile(D.sample_spec(2))
        lat = vae.encode(img)
        assert lat.mean.size == 256
        assert img.size // lat.mean.size == 12

    def test_roundtrip_preserves_spatial_dims(self, vae):
        img = D.render_tile(D.sample_spec(3))
        out = vae.decode(vae.encode(img).mean)
        assert out.shape == img.shape

    def test_shape_errors_report_expected_and_actual(self, vae):
        with pytest.raises(ValueError, match="30"):
            vae.encode(np.zeros((30, 30, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="8, 8, 5"):
            vae.decode(np.zeros((8, 8, 5), dtype=np.float32))

    def test_config_rejects_non_power_of_two(self):
        with pytest.raises(ValueError, match="power of 2"):
            VaeConfig(downsample_factor=3)


class TestDeterminism:
    def test_encode_twice_identical(self, vae):
        img = D.render_tile(D.sample_spec(4))
        a, b = vae.encode(img), vae.encode(img)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.log_variance, b.log_variance)

    def test_decode_zero_latent_twice_identical(self, vae):
        z = np.zeros((8, 8, 4), dtype=np.float32)
        assert np.array_equal(vae.decode(z), vae.decode(z))

    def test_posterior_sampling_uses_explicit_noise(self, vae):
        img = D.render_tile(D.sample_spec(5))
        lat = vae.encode(img)
        noise = np.random.default_rng(0).standard_normal(lat.mean.shape)
        drawn = lat.sample(noise)
        np.testing.assert_allclose(
            drawn, lat.mean + np.exp(0.5 * lat.log_variance) * noise
        )
        assert np.array_equal(lat.sample(np.zeros_like(noise)), lat.mean)


class TestGradients:
    def test_analytic_gradients_match_central_differences(self):
        torch.manual_seed(0)
        model = Vae(VaeConfig(base_width=4, latent_channels=2), seed=7).double()
        x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        noise = torch.randn(1, 2, 1, 1, dtype=torch.float64)

        def loss_value():
            total, _, _ = vae_loss(model, x, noise)
            return total

        loss = loss_value()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        rng = np.random.default_rng(3)
        h = 1e-5
        checked = 0
        while checked < 10:
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
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-3
            checked += 1


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("vaedata")
    return D.build_dataset(D.BuildConfig(60, 12, 12, 11, str(out / "ds")))


class TestTraining:
    def test_smoke_train_and_checkpoint_roundtrip(self, tiny_manifest, tmp_path):
        cp = train_vae(
            tiny_manifest, VaeConfig(base_width=8),
            VaeTrainConfig(epochs=1, batch_size=32, seed=0), tmp_path / "vae"
        )
        model, manifest = load_vae(tmp_path / "vae")
        assert manifest.content_hash == cp.content_hash
        img = D.render_tile(D.sample_spec(9))
        fresh = Vae(VaeConfig(base_width=8), seed=0)
        fresh.load_state_dict(model.state_dict())
        a = model.encode(img).mean
        b = fresh.eval().encode(img).mean
        assert np.array_equal(a, b)

    def test_validation_loss_improves(self, tiny_manifest, tmp_path):
        cp = train_vae(
            tiny_manifest, VaeConfig(base_width=8),
            VaeTrainConfig(epochs=4, batch_size=32, seed=0), tmp_path / "vae"
        )
        hist = cp.metrics["history"]
        assert hist[-1]["val_l1"] <= hist[0]["val_l1"]

    def test_empty_split_rejected(self, tmp_path):
        empty = D.Manifest("v", 0, "", records=[], root=tmp_path)
        with pytest.raises(ValueError, match="train"):
            train_vae(empty, VaeConfig(), VaeTrainConfig(epochs=1), tmp_path / "x")


def test_psnr_known_values():
    a = np.zeros((4, 4)), np.full((4, 4), 0.1)
    assert psnr(a[0], a[1]) == pytest.approx(20.0)
    assert psnr(a[0], a[0]) == float("inf")
