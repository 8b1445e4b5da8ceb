import pytest
import torch

from unposed3d.synthesizer import (
    StyleSynthesizer,
    adain,
    full_scale_synthesizer,
    synthesize_triplane,
)


class TestAdain:
    def test_normalization_identity(self):
        x = torch.randn(6, 8, 8) * 3 + 1
        out = adain(x, torch.ones(6), torch.zeros(6))
        assert out.mean(dim=(1, 2)).abs().max() < 1e-5
        assert (out.std(dim=(1, 2), unbiased=False) - 1).abs().max() < 1e-4

    def test_target_moments(self):
        torch.manual_seed(0)
        x = torch.randn(4, 16, 16)
        out = adain(x, torch.full((4,), 2.5), torch.full((4,), -1.0))
        assert (out.mean(dim=(1, 2)) + 1.0).abs().max() < 1e-4
        assert (out.std(dim=(1, 2), unbiased=False) - 2.5).abs().max() < 1e-3

    def test_constant_channel_collapses_to_bias(self):
        x = torch.full((2, 8, 8), 7.0)
        out = adain(x, torch.ones(2), torch.tensor([0.3, -0.2]))
        assert torch.allclose(out[0], torch.full((8, 8), 0.3), atol=1e-4)
        assert torch.allclose(out[1], torch.full((8, 8), -0.2), atol=1e-4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adain(torch.randn(3, 4, 4), torch.ones(2), torch.zeros(3))


class TestStyleSynthesizer:
    def test_desk_plane_shape(self):
        syn = StyleSynthesizer(latent_dim=3072)
        tp = syn(torch.randn(3072))
        assert tp.planes.shape == (3, 32, 32, 32)

    def test_tiny_plane_shape(self):
        syn = StyleSynthesizer(
            latent_dim=256, plane_resolution=16, plane_channels=8, base_channels=64
        )
        tp = syn(torch.randn(256))
        assert tp.planes.shape == (3, 8, 16, 16)

    def test_noise_off_deterministic(self):
        syn = StyleSynthesizer(latent_dim=128, plane_resolution=8,
                               plane_channels=4, base_channels=32)
        latent = torch.randn(128)
        a = synthesize_triplane(latent, syn, noise_mode="off")
        b = synthesize_triplane(latent, syn, noise_mode="off")
        assert torch.equal(a.planes, b.planes)

    def test_frozen_noise_deterministic(self):
        syn = StyleSynthesizer(latent_dim=128, plane_resolution=8,
                               plane_channels=4, base_channels=32)
        latent = torch.randn(128)
        a = syn(latent, noise_mode="frozen")
        b = syn(latent, noise_mode="frozen")
        assert torch.equal(a.planes, b.planes)

    def test_distinct_latents_distinct_planes(self):
        torch.manual_seed(0)
        syn = StyleSynthesizer(latent_dim=128, plane_resolution=8,
                               plane_channels=4, base_channels=32)
        for _ in range(10):
            a = syn(torch.randn(128), noise_mode="off")
            b = syn(torch.randn(128), noise_mode="off")
            assert (a.planes - b.planes).norm() > 0

    def test_init_magnitude_bounded(self):
        torch.manual_seed(0)
        syn = StyleSynthesizer(latent_dim=3072)
        tp = syn(torch.randn(3072))
        assert 0.1 <= tp.planes.std().item() <= 10.0

    def test_gradient_reaches_latent_and_affines(self):
        syn = StyleSynthesizer(latent_dim=128, plane_resolution=8,
                               plane_channels=4, base_channels=32)
        latent = torch.randn(128, requires_grad=True)
        tp = syn(latent, noise_mode="off")
        (tp.planes**2).sum().backward()
        assert latent.grad.norm() > 0
        for level in syn.levels:
            assert level.affine.weight.grad is not None
            assert level.affine.weight.grad.norm() > 0

    def test_latent_width_mismatch_rejected(self):
        syn = StyleSynthesizer(latent_dim=128, plane_resolution=8,
                               plane_channels=4, base_channels=32)
        with pytest.raises(ValueError):
            syn(torch.randn(64))

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError):
            StyleSynthesizer(latent_dim=64, plane_resolution=12)

    def test_bad_level_channels_rejected(self):
        with pytest.raises(ValueError):
            StyleSynthesizer(latent_dim=64, plane_resolution=8, plane_channels=4,
                             base_channels=32, level_channels=[16, 16])

    def test_level_count(self):
        # levels = log2(res / 4) + 1
        syn = StyleSynthesizer(latent_dim=64, plane_resolution=32,
                               plane_channels=4, base_channels=64)
        assert len(syn.levels) == 4

    def test_full_scale_channel_schedule(self):
        syn = full_scale_synthesizer(latent_dim=64)
        outs = [level.conv.out_channels for level in syn.levels]
        assert outs == [768, 384, 192, 96, 240]
        sizes = [level.size for level in syn.levels]
        assert sizes == [4, 8, 16, 32, 64]
