"""Frame encoding and pose-free latent alignment.

Frames are encoded independently into flattened latent tokens, then a
bidirectional transformer encoder compresses the (unordered) token sequence
into three learned prefix tokens whose outputs are concatenated into a
fixed-size scene feature, independent of the number of input frames.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class FrameEncoder(nn.Module):
    """Strided convolutional encoder image (H, W, 3) -> latent (h, w, d).

    A small trainable stand-in for a pretrained autoencoder; the spatial
    downsampling factor and latent depth are configurable so a pretrained
    encoder with the same tensor contract can be dropped in.
    """

    def __init__(self, downsample: int = 4, latent_channels: int = 4, width: int = 32):
        super().__init__()
        if downsample & (downsample - 1) or downsample < 2:
            raise ValueError("downsample must be a power of two >= 2")
        self.downsample = downsample
        self.latent_channels = latent_channels
        layers: list[nn.Module] = []
        c_in = 3
        d = downsample
        while d > 1:
            c_out = latent_channels if d == 2 else width
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)]
            if d > 2:
                layers += [nn.SiLU()]
            c_in = c_out
            d //= 2
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (n, H, W, 3) in [0, 1] -> latents (n, h, w, d)."""
        x = images.permute(0, 3, 1, 2) * 2.0 - 1.0
        return self.net(x).permute(0, 2, 3, 1)


def token_dim(resolution: int, downsample: int, latent_channels: int = 4) -> int:
    h = resolution // downsample
    return h * h * latent_channels


def encode_frames(frames: torch.Tensor, enc: FrameEncoder) -> torch.Tensor:
    """Encode a stack of frames (n, H, W, 3) into a token sequence (n, d')."""
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (n, H, W, 3) frames, got {tuple(frames.shape)}")
    h, w = frames.shape[1], frames.shape[2]
    if h != w or h % 16 != 0:
        raise ValueError(f"frames must be square with resolution divisible by 16, got {h}x{w}")
    latents = enc(frames)
    return latents.reshape(frames.shape[0], -1)


class LatentAligner(nn.Module):
    """Transformer encoder that aligns frame tokens into a scene feature.

    Three learnable prefix tokens (plus a prefix/frame type indicator added
    to every token) are processed together with the frame tokens; the three
    prefix outputs are concatenated into a vector of length 3*d'. No
    positional encoding is applied over frame tokens, so the output is
    invariant to frame order.
    """

    def __init__(
        self,
        token_width: int,
        layers: int = 4,
        heads: int = 4,
        ff_dim: int = 512,
        model_width: int | None = None,
    ):
        super().__init__()
        self.token_width = token_width
        width = model_width or token_width
        self.in_proj = nn.Linear(token_width, width) if width != token_width else nn.Identity()
        self.out_proj = nn.Linear(width, token_width) if width != token_width else nn.Identity()
        self.prefix_tokens = nn.Parameter(torch.randn(3, token_width) * 0.02)
        self.type_prefix = nn.Parameter(torch.randn(token_width) * 0.02)
        self.type_frame = nn.Parameter(torch.randn(token_width) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=ff_dim,
            batch_first=True,
            dropout=0.0,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (n, d') frame tokens -> scene feature (3*d',)."""
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("need a (n >= 1, d') token sequence")
        if tokens.shape[1] != self.token_width:
            raise ValueError(
                f"token width {tokens.shape[1]} != aligner width {self.token_width}"
            )
        prefix = self.prefix_tokens + self.type_prefix
        frames = tokens + self.type_frame
        seq = torch.cat([prefix, frames], dim=0).unsqueeze(0)
        seq = self.in_proj(seq)
        out = self.encoder(seq)
        aligned = self.out_proj(out[0, :3])
        return aligned.reshape(-1)


def align_latents(tokens: torch.Tensor, aligner: LatentAligner) -> torch.Tensor:
    return aligner(tokens)
