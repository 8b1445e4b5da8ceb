"""The full reconstruction network: frames -> scene feature -> tri-plane."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .perception import FrameEncoder, LatentAligner, encode_frames, token_dim
from .synthesizer import StyleSynthesizer
from .triplane import RadianceDecoder, TriPlane


@dataclass
class ModelConfig:
    frame_resolution: int = 64
    encoder_downsample: int = 4
    latent_channels: int = 4
    aligner_layers: int = 4
    aligner_heads: int = 4
    aligner_ff_dim: int = 512
    aligner_model_width: int | None = None  # None = identity (width d')
    plane_resolution: int = 32
    plane_channels: int = 32
    synth_base_channels: int = 256
    decoder_hidden: int = 64

    @property
    def token_width(self) -> int:
        return token_dim(self.frame_resolution, self.encoder_downsample, self.latent_channels)

    @property
    def scene_feature_dim(self) -> int:
        return 3 * self.token_width


def desk_config() -> ModelConfig:
    """Workstation-scale default: 64x64 frames, d' = 1024, 32^3 planes."""
    return ModelConfig()


def full_scale_config() -> ModelConfig:
    """Published architecture sizes: 256x256 frames, d' = 4096, 64x64x80 planes."""
    return ModelConfig(
        frame_resolution=256,
        encoder_downsample=8,
        aligner_layers=16,
        aligner_heads=8,
        aligner_ff_dim=2048,
        plane_resolution=64,
        plane_channels=80,
        synth_base_channels=1536,
    )


def tiny_config(frame_resolution: int = 32) -> ModelConfig:
    """Minimal configuration for fast CPU tests and toy training runs."""
    return ModelConfig(
        frame_resolution=frame_resolution,
        encoder_downsample=4,
        aligner_layers=2,
        aligner_heads=4,
        aligner_ff_dim=256,
        plane_resolution=32,
        plane_channels=16,
        synth_base_channels=128,
        decoder_hidden=48,
    )


class ReconstructionModel(nn.Module):
    """Encode + align + synthesize; renders happen through the tri-plane."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg.encoder_downsample, cfg.latent_channels)
        self.aligner = LatentAligner(
            cfg.token_width,
            layers=cfg.aligner_layers,
            heads=cfg.aligner_heads,
            ff_dim=cfg.aligner_ff_dim,
            model_width=cfg.aligner_model_width,
        )
        self.synthesizer = StyleSynthesizer(
            cfg.scene_feature_dim,
            plane_resolution=cfg.plane_resolution,
            plane_channels=cfg.plane_channels,
            base_channels=cfg.synth_base_channels,
        )
        self.decoder = RadianceDecoder(3 * cfg.plane_channels, hidden=cfg.decoder_hidden)

    def scene_feature(self, frames: torch.Tensor) -> torch.Tensor:
        tokens = encode_frames(frames, self.encoder)
        return self.aligner(tokens)

    def forward(self, frames: torch.Tensor, noise_mode: str | None = None) -> TriPlane:
        return self.synthesizer(self.scene_feature(frames), noise_mode=noise_mode)
