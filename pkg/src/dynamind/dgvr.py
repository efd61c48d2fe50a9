"""Dual-guidance video reconstructor.

A latent video diffusion model over [N, c, h, w] frame latents. The semantic
condition enters through cross-attention; the projected blueprint is upsampled to
one latent plane per frame and used to structure the starting latent
x_T = eps + alpha * U(z_B). Inside the denoiser only the frame-varying part of
those planes (each plane minus the clip mean) is added to the first feature map,
so the blueprint steers motion there while static content comes from x_T and
the semantic condition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import FrameVAE, tensor_to_frames
from .data.types import VideoClip
from .diffusion import (NoiseSchedule, check_timesteps, ddim_timesteps, forward_noise, make_schedule,
                        sample_timesteps, timestep_embedding)
from .errors import ValidationError

SAMPLERS = ("deterministic", "ancestral")


@dataclass
class GuidanceBundle:
    semantic: torch.Tensor | None = None  # [B, cond_dim]
    z_b: torch.Tensor | None = None  # [B, N, D_latent]
    alpha: float = 0.3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("guidance strength alpha must be >= 0")
        if self.z_b is not None and not torch.isfinite(self.z_b).all():
            raise ValidationError("projected blueprint contains NaN or Inf")


class BlueprintUpsampler(nn.Module):
    """Per-frame linear map from a projected blueprint row to one latent plane."""

    def __init__(self, d_blueprint: int, latent_shape: tuple[int, int, int]):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.proj = nn.Linear(d_blueprint, int(np.prod(latent_shape)))

    def forward(self, z_b: torch.Tensor) -> torch.Tensor:
        return self.proj(z_b).reshape(*z_b.shape[:-1], *self.latent_shape)


def init_latent(epsilon: torch.Tensor, z_b: torch.Tensor | None, alpha: float, upsampler=None) -> torch.Tensor:
    """x_T = eps + alpha * U(z_B)."""
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    if z_b is None or upsampler is None:
        return epsilon
    up = upsampler(z_b)
    if up.shape != epsilon.shape:
        raise ValidationError(f"upsampled blueprint {tuple(up.shape)} does not match latent {tuple(epsilon.shape)}")
    return epsilon + alpha * up


# ------------------------------------------------------------------ denoiser network

class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _TemporalMix(nn.Module):
    """Residual 1-D convolution across frames at every spatial position."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, ch), ch)
        self.conv = nn.Conv1d(ch, ch, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x, n_frames):
        bn, c, h, w = x.shape
        b = bn // n_frames
        y = self.norm(x).reshape(b, n_frames, c, h, w).permute(0, 3, 4, 2, 1).reshape(b * h * w, c, n_frames)
        y = self.conv(y).reshape(b, h, w, c, n_frames).permute(0, 4, 3, 1, 2).reshape(bn, c, h, w)
        return x + y


class _CrossAttention(nn.Module):
    def __init__(self, ch: int, cond_dim: int, tokens: int, heads: int):
        super().__init__()
        self.tokens = tokens
        self.norm = nn.GroupNorm(min(8, ch), ch)
        self.to_tokens = nn.Linear(cond_dim, tokens * ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, cond, n_frames):
        bn, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)  # [BN, hw, c]
        kv = self.to_tokens(cond).reshape(cond.shape[0], self.tokens, c)
        kv = kv.repeat_interleave(n_frames, dim=0)
        y, _ = self.attn(q, kv, kv, need_weights=False)
        return x + self.out(y).transpose(1, 2).reshape(bn, c, h, w)


class VideoDenoiser(nn.Module):
    """Two-level U-shaped noise predictor eps(x_t, t, semantic condition, z_B)."""

    def __init__(self, latent_shape: tuple[int, int, int], d_blueprint: int, cond_dim: int, base_width: int = 32,
                 T_steps: int = 100, cond_tokens: int = 4, heads: int = 4):
        super().__init__()
        c, h, w = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.cond_dim = cond_dim
        self.T_steps = T_steps
        w1, w2 = base_width, 2 * base_width
        tdim = 2 * base_width
        self.tdim = tdim
        self.time = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.upsampler = BlueprintUpsampler(d_blueprint, latent_shape)
        self.inp = nn.Conv2d(c, w1, 3, padding=1)
        self.inject = nn.Conv2d(c, w1, 1)
        self.enc1 = _ResBlock(w1, w1, tdim)
        self.tmix1 = _TemporalMix(w1)
        self.xattn1 = _CrossAttention(w1, cond_dim, cond_tokens, heads)
        self.down = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(w2, w2, tdim)
        self.tmix2 = _TemporalMix(w2)
        self.xattn2 = _CrossAttention(w2, cond_dim, cond_tokens, heads)
        self.dec1 = _ResBlock(w2 + w1, w1, tdim)
        self.out = nn.Sequential(nn.GroupNorm(min(8, w1), w1), nn.SiLU(), nn.Conv2d(w1, c, 3, padding=1))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, semantic: torch.Tensor | None = None,
                z_b: torch.Tensor | None = None) -> torch.Tensor:
        b, n = x_t.shape[:2]
        dtype = x_t.dtype
        if semantic is None:
            semantic = x_t.new_zeros(b, self.cond_dim)
        plane = torch.zeros_like(x_t)
        if z_b is not None:
            plane = self.upsampler(z_b)
            plane = plane - plane.mean(dim=1, keepdim=True)
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = self.time(timestep_embedding(t, self.tdim, self.T_steps).to(dtype)).repeat_interleave(n, dim=0)

        h1 = self.inp(x_t.flatten(0, 1)) + self.inject(plane.flatten(0, 1))
        h1 = self.enc1(h1, temb)
        h1 = self.xattn1(self.tmix1(h1, n), semantic, n)
        h2 = self.enc2(self.down(h1), temb)
        h2 = self.xattn2(self.tmix2(h2, n), semantic, n)
        up = F.interpolate(h2, size=h1.shape[-2:], mode="nearest")
        h = self.dec1(torch.cat([up, h1], dim=1), temb)
        return self.out(h).reshape(x_t.shape)


# ------------------------------------------------------------------ objective & samplers

def dgvr_loss(denoiser, x0: torch.Tensor, guidance: GuidanceBundle, schedule: NoiseSchedule,
              generator: torch.Generator | None = None, t: torch.Tensor | None = None,
              noise: torch.Tensor | None = None) -> torch.Tensor:
    """Mean-over-elements ||eps - eps_theta(x_t, t, semantic, z_B)||^2 with t ~ U{1..T} per sample."""
    b = x0.shape[0]
    if t is None:
        t = sample_timesteps(b, schedule.T, generator)
    t = check_timesteps(t, schedule.T)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_noise(x0, t, noise, schedule)
    pred = denoiser(x_t, t, guidance.semantic, guidance.z_b)
    if pred.shape != noise.shape:
        raise ValidationError(f"denoiser output {tuple(pred.shape)} != latent {tuple(noise.shape)}")
    return ((noise - pred) ** 2).mean()


def _upsampler_of(denoiser, upsampler):
    return upsampler if upsampler is not None else getattr(denoiser, "upsampler", None)


@torch.no_grad()
def sample(denoiser, guidance: GuidanceBundle, schedule: NoiseSchedule, shape: tuple[int, ...], *,
           sampler: str = "deterministic", steps: int | None = None, seed: int = 0, upsampler=None,
           dtype: torch.dtype = torch.float32, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Reverse diffusion from the blueprint-structured x_T down to t = 0.

    ``seed`` fixes the Gaussian part of x_T unless ``noise`` supplies it directly; the
    ancestral sampler draws its per-step noise from a second stream derived from ``seed``.
    """
    if sampler not in SAMPLERS:
        raise ValidationError(f"unknown sampler '{sampler}'")
    steps = schedule.T if steps is None else steps
    if steps > schedule.T:
        raise ValidationError(f"steps ({steps}) exceeds T ({schedule.T})")
    if noise is None:
        noise = torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)))
    elif tuple(noise.shape) != tuple(shape):
        raise ValidationError(f"noise {tuple(noise.shape)} does not match shape {tuple(shape)}")
    eps0 = noise.to(dtype)
    x = init_latent(eps0, guidance.z_b, guidance.alpha, _upsampler_of(denoiser, upsampler))
    if steps == 0:
        return x
    step_gen = torch.Generator().manual_seed(int(seed) + 7919)
    ab = schedule.alpha_bars.to(dtype)
    grid = ddim_timesteps(schedule.T, steps)
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        t_b = torch.full((shape[0],), t_cur, dtype=torch.long)
        eps = denoiser(x, t_b, guidance.semantic, guidance.z_b)
        x0 = (x - (1 - ab[t_cur]).sqrt() * eps) / ab[t_cur].sqrt()
        if t_next == 0:
            x = x0
            continue
        if sampler == "deterministic":
            x = ab[t_next].sqrt() * x0 + (1 - ab[t_next]).sqrt() * eps
        else:
            var = (1 - ab[t_next]) / (1 - ab[t_cur]) * (1 - ab[t_cur] / ab[t_next])
            sigma = var.clamp_min(0).sqrt()
            direction = (1 - ab[t_next] - sigma ** 2).clamp_min(0).sqrt() * eps
            x = ab[t_next].sqrt() * x0 + direction + sigma * torch.randn(shape, generator=step_gen).to(dtype)
    return x


@torch.no_grad()
def ddim_invert(denoiser, x0: torch.Tensor, schedule: NoiseSchedule, steps: int,
                guidance: GuidanceBundle | None = None, fixed_point_iters: int = 5,
                return_trajectory: bool = False):
    """Deterministic inversion: each step solves the deterministic sampler update backwards.

    The first iterate is the usual explicit DDIM inversion; ``fixed_point_iters`` refinements
    make the step the exact inverse of the sampler step whenever they converge.
    """
    if steps < 1:
        raise ValidationError("inversion needs steps >= 1")
    guidance = guidance or GuidanceBundle(alpha=0.0)
    grid = ddim_timesteps(schedule.T, steps)[::-1]  # ascending
    ab = schedule.alpha_bars.to(x0.dtype)
    x = x0
    trajectory = [x0]
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        t_b = torch.full((x.shape[0],), t_next, dtype=torch.long)
        sa_cur, sb_cur = ab[t_cur].sqrt(), (1 - ab[t_cur]).sqrt()
        sa_next, sb_next = ab[t_next].sqrt(), (1 - ab[t_next]).sqrt()
        x_next = x
        for _ in range(fixed_point_iters + 1):
            eps = denoiser(x_next, t_b, guidance.semantic, guidance.z_b)
            x_next = sa_next * (x - sb_cur * eps) / sa_cur + sb_next * eps
        x = x_next
        trajectory.append(x)
    return trajectory if return_trajectory else x


def decode_video(ae: FrameVAE, x0: torch.Tensor, fps: float = 3.0) -> VideoClip:
    """[N, c, h, w] latent clip -> pixel clip, values clipped to [0, 1]."""
    if x0.ndim != 4 or tuple(x0.shape[1:]) != ae.latent_shape:
        raise ValidationError(f"latent clip must be [N, {ae.latent_shape}], got {tuple(x0.shape)}")
    was_training = ae.training
    ae.eval()
    with torch.no_grad():
        frames = ae.decode(x0.float())
    ae.train(was_training)
    return VideoClip(np.clip(tensor_to_frames(frames), 0.0, 1.0), fps=fps)


__all__ = [
    "GuidanceBundle", "BlueprintUpsampler", "VideoDenoiser", "make_schedule", "forward_noise", "init_latent",
    "dgvr_loss", "sample", "ddim_invert", "decode_video", "SAMPLERS",
]
