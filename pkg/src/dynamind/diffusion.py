"""Noise schedule and closed-form forward process shared by the prior and the video model.

Timesteps are integers in [0, T]; index 0 is the clean sample (alpha_bar_0 = 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # [T + 1], betas[0] = 0
    alpha_bars: torch.Tensor  # [T + 1], alpha_bars[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def to(self, dtype: torch.dtype) -> "NoiseSchedule":
        return NoiseSchedule(self.betas.to(dtype), self.alpha_bars.to(dtype))


def make_schedule(T_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear betas; alpha_bar is their cumulative survival product (computed in float64)."""
    if T_steps < 1:
        raise ValidationError("T_steps must be >= 1")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValidationError("need 0 < beta_min < beta_max < 1")
    if T_steps == 1:
        betas = torch.tensor([beta_min], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_min, beta_max, T_steps, dtype=torch.float64)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas, alpha_bars)


def check_timesteps(t: torch.Tensor | int, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) > T):
        raise ValidationError(f"timestep outside [0, {T}]")
    return t


def _bcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    values = values.to(like.dtype)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def forward_noise(x0: torch.Tensor, t, epsilon: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` is a scalar or one step per leading batch index."""
    if epsilon.shape != x0.shape:
        raise ValidationError(f"noise shape {tuple(epsilon.shape)} != sample shape {tuple(x0.shape)}")
    t = check_timesteps(t, schedule.T)
    ab = _bcast(schedule.alpha_bars[t], x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * epsilon


def sample_timesteps(batch: int, T: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch,), generator=generator)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """Sinusoidal embedding of t / T, shape [B, dim]."""
    t = torch.as_tensor(t).reshape(-1).to(torch.get_default_dtype()) / max(T, 1) * 1000.0
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending timesteps T = t_0 > ... > t_steps = 0."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if steps > T:
        raise ValidationError(f"steps ({steps}) exceeds T ({T})")
    grid = torch.linspace(T, 0, steps + 1, dtype=torch.float64).round().long().tolist()
    return grid
