"""Style-modulated convolutional synthesizer: scene feature -> tri-plane.

A learned constant 4x4 feature map is progressively upsampled; at every
level the scene feature modulates the activations through an affine map
feeding AdaIN, and per-channel scaled noise is injected.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .triplane import TriPlane

ADAIN_EPS = 1e-8


def adain(x: torch.Tensor, y_s: torch.Tensor, y_b: torch.Tensor) -> torch.Tensor:
    """Adaptive instance normalization.

    x: (c, H, W); y_s, y_b: (c,). Per channel over spatial positions:
    y_s * (x - mu) / sigma + y_b, with an epsilon stabilizer so constant
    channels collapse to y_b instead of dividing by zero.
    """
    if x.shape[0] != y_s.shape[0] or x.shape[0] != y_b.shape[0]:
        raise ValueError("channel counts of x, y_s, y_b must agree")
    mu = x.mean(dim=(1, 2), keepdim=True)
    sigma = x.std(dim=(1, 2), unbiased=False, keepdim=True)
    return y_s.view(-1, 1, 1) * (x - mu) / (sigma + ADAIN_EPS) + y_b.view(-1, 1, 1)


class SynthesisLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int, size: int, latent_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.size = size
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.affine = nn.Linear(latent_dim, 2 * c_out)
        self.noise_scale = nn.Parameter(torch.zeros(c_out))
        self.register_buffer("frozen_noise", torch.randn(c_out, size, size))
        # AdaIN scale starts near 1, bias near 0; small weight keeps gradients
        # to the scene feature alive at init without blowing up activations
        nn.init.normal_(self.affine.weight, std=0.01)
        nn.init.zeros_(self.affine.bias)
        with torch.no_grad():
            self.affine.bias[:c_out] = 1.0

    def forward(self, x: torch.Tensor, latent: torch.Tensor, noise_mode: str) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x.unsqueeze(0), scale_factor=2, mode="nearest").squeeze(0)
        x = self.conv(x.unsqueeze(0)).squeeze(0)
        if noise_mode == "fresh":
            noise = torch.randn_like(self.frozen_noise)
        elif noise_mode == "frozen":
            noise = self.frozen_noise
        elif noise_mode == "off":
            noise = None
        else:
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        if noise is not None:
            x = x + self.noise_scale.view(-1, 1, 1) * noise
        ys_yb = self.affine(latent)
        y_s, y_b = ys_yb.chunk(2)
        x = adain(x, y_s, y_b)
        return F.leaky_relu(x, 0.2)


class StyleSynthesizer(nn.Module):
    """Progressive style-based decoder emitting three feature planes.

    Channel schedules:
      full-scale preset: 1536 -> 768 -> 384 -> 192 -> 96 -> 240 over 4..64,
                    final 240 = 3 * 80 channels split into planes.
      desk preset:  256 -> 128 -> 96 -> 96 over 4..32, final 96 = 3 * 32.
    """

    def __init__(self, latent_dim: int, plane_resolution: int = 32, plane_channels: int = 32,
                 base_channels: int = 256, level_channels: list[int] | None = None,
                 noise_mode: str = "frozen"):
        super().__init__()
        if plane_resolution < 4 or plane_resolution & (plane_resolution - 1):
            raise ValueError("plane_resolution must be a power of two >= 4")
        self.latent_dim = latent_dim
        self.plane_resolution = plane_resolution
        self.plane_channels = plane_channels
        self.noise_mode = noise_mode

        n_levels = (plane_resolution // 4).bit_length()  # log2(res/4) + 1
        self.const = nn.Parameter(torch.randn(base_channels, 4, 4))
        if level_channels is None:
            # geometric taper, floored at the final plane stack width
            level_channels = [
                max(base_channels >> (i + 1), 3 * plane_channels)
                for i in range(n_levels - 1)
            ] + [3 * plane_channels]
        if len(level_channels) != n_levels or level_channels[-1] != 3 * plane_channels:
            raise ValueError("level_channels must have one entry per level, ending at 3*plane_channels")
        channels = [base_channels] + list(level_channels)
        self.levels = nn.ModuleList(
            SynthesisLevel(
                channels[i], channels[i + 1], size=4 << i,
                latent_dim=latent_dim, upsample=i > 0,
            )
            for i in range(n_levels)
        )

    def forward(self, latent: torch.Tensor, noise_mode: str | None = None) -> TriPlane:
        if latent.ndim != 1 or latent.shape[0] != self.latent_dim:
            raise ValueError(
                f"scene feature of length {self.latent_dim} expected, got {tuple(latent.shape)}"
            )
        mode = noise_mode or self.noise_mode
        x = self.const
        for level in self.levels:
            x = level(x, latent, mode)
        planes = x.reshape(3, self.plane_channels, self.plane_resolution, self.plane_resolution)
        return TriPlane(planes=planes)


def full_scale_synthesizer(latent_dim: int) -> StyleSynthesizer:
    """Full-scale preset: 4x4x1536 up to three 64x64x80 planes."""
    return StyleSynthesizer(
        latent_dim, plane_resolution=64, plane_channels=80, base_channels=1536,
        level_channels=[768, 384, 192, 96, 240],
    )


def synthesize_triplane(
    latent: torch.Tensor, syn: StyleSynthesizer, noise_mode: str | None = None
) -> TriPlane:
    return syn(latent, noise_mode=noise_mode)
