"""Small variational frame autoencoder standing in for a pretrained image VAE.

Encoder and decoder are shared by the temporal aligner (video features) and the
video reconstructor (latent space and pixel decoding).
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.GroupNorm(4, cout), nn.SiLU())


def _up(cin, cout):
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, padding=1),
                         nn.GroupNorm(4, cout), nn.SiLU())


class FrameVAE(nn.Module):
    """Three stride-2 stages: an HxW frame maps to a (H/8)x(W/8) latent grid."""

    def __init__(self, latent_channels: int = 8, width: int = 32, height: int = 32, image_width: int = 32):
        super().__init__()
        if height % 8 or image_width % 8:
            raise ValidationError("frame height and width must be multiples of 8")
        self.latent_channels = latent_channels
        self.frame_size = (height, image_width)
        self.encoder = nn.Sequential(_down(3, width), _down(width, 2 * width), _down(2 * width, 2 * width))
        self.to_stats = nn.Conv2d(2 * width, 2 * latent_channels, 1)
        self.from_latent = nn.Conv2d(latent_channels, 2 * width, 3, padding=1)
        self.decoder = nn.Sequential(_up(2 * width, 2 * width), _up(2 * width, width), _up(width, width),
                                     nn.Conv2d(width, 3, 3, padding=1))
        # multiplies raw latent means so the diffusion space has ~unit variance
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h, w = self.frame_size
        return self.latent_channels, h // 8, w // 8

    def stats(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.to_stats(self.encoder(frames)).chunk(2, dim=1)
        return mu, logvar.clamp(-10, 10)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """Scaled posterior mean for [B, 3, H, W] frames; no sampling."""
        if tuple(frames.shape[-2:]) != self.frame_size:
            raise ValidationError(f"frames are {tuple(frames.shape[-2:])}, autoencoder expects {self.frame_size}")
        return self.stats(frames)[0] * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[-3:]) != self.latent_shape:
            raise ValidationError(f"latent shape {tuple(z.shape[-3:])} != {self.latent_shape}")
        return torch.sigmoid(self.decoder(self.from_latent(z / self.latent_scale)))

    def loss(self, frames: torch.Tensor, generator: torch.Generator | None = None,
             kl_weight: float = 1e-4) -> tuple[torch.Tensor, dict[str, float]]:
        mu, logvar = self.stats(frames)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + (0.5 * logvar).exp() * eps
        recon = torch.sigmoid(self.decoder(self.from_latent(z)))
        rec = F.mse_loss(recon, frames)
        kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).mean()
        return rec + kl_weight * kl, {"recon": rec.item(), "kl": kl.item()}

    @torch.no_grad()
    def calibrate_scale(self, frames: torch.Tensor) -> float:
        mu, _ = self.stats(frames)
        scale = 1.0 / float(mu.std().clamp_min(1e-6))
        self.latent_scale.fill_(scale)
        return scale


def frames_to_tensor(frames) -> torch.Tensor:
    """[..., H, W, 3] numpy/tensor in [0, 1] -> [..., 3, H, W] float tensor."""
    x = torch.as_tensor(frames, dtype=torch.float32)
    return x.movedim(-1, -3)


def tensor_to_frames(x: torch.Tensor):
    return x.movedim(-3, -1).detach().cpu().numpy()
