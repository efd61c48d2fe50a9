"""Temporal-aware dynamic aligner.

EEG windows are encoded by one shared dilated causal TCN into a blueprint
[N, D_eeg]; blueprint and frame latents are projected into a shared space and
aligned frame-by-frame (content) and through their cosine Gram matrices (structure).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import FrameVAE, frames_to_tensor
from .data.types import VideoClip
from .errors import ConfigError, NumericError, ValidationError


class CausalConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, dilation: int, kernel_size: int = 3):
        super().__init__()
        self.left_pad = (kernel_size - 1) * dilation
        self.conv1 = nn.Conv1d(cin, cout, kernel_size, dilation=dilation)
        self.conv2 = nn.Conv1d(cout, cout, kernel_size, dilation=dilation)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = F.gelu(self.conv1(F.pad(x, (self.left_pad, 0))))
        h = F.gelu(self.conv2(F.pad(h, (self.left_pad, 0))))
        return h + self.skip(x)


class BlueprintTCN(nn.Module):
    """Dilated causal blocks (1, 2, 4), global average pool, linear head to D_eeg."""

    def __init__(self, in_channels: int, width: int = 64, d_eeg: int = 128, dilations: Sequence[int] = (1, 2, 4)):
        super().__init__()
        chans = [in_channels] + [width] * len(dilations)
        self.blocks = nn.Sequential(*(CausalConvBlock(chans[i], chans[i + 1], d) for i, d in enumerate(dilations)))
        self.head = nn.Linear(width, d_eeg)
        self.d_eeg = d_eeg

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """[B, N, C, S] windows -> [B, N, D_eeg] blueprints, weights shared over windows."""
        b, n, c, s = windows.shape
        h = self.blocks(windows.reshape(b * n, c, s)).mean(dim=-1)
        return self.head(h).reshape(b, n, -1)


def extract_blueprint(net: BlueprintTCN, windows: Sequence[np.ndarray | torch.Tensor]) -> torch.Tensor:
    if len(windows) < 2:
        raise ValidationError("a blueprint needs at least two windows")
    shapes = {tuple(w.shape) for w in windows}
    if len(shapes) != 1:
        raise ValidationError(f"ragged window shapes {sorted(shapes)}")
    dtype = next(net.parameters()).dtype
    stacked = torch.stack([torch.as_tensor(np.asarray(w) if not torch.is_tensor(w) else w, dtype=dtype)
                           for w in windows])
    return net(stacked[None])[0]


def encode_video(ae: FrameVAE, video: VideoClip | np.ndarray, n_frames: int | None = None) -> torch.Tensor:
    """Per-frame posterior means, flattened: [N, latent_c * latent_h * latent_w]."""
    frames = video.frames if isinstance(video, VideoClip) else np.asarray(video)
    if n_frames is not None and frames.shape[0] != n_frames:
        raise ValidationError(f"video has {frames.shape[0]} frames, expected {n_frames}")
    was_training = ae.training
    ae.eval()
    with torch.no_grad():
        z = ae.encode(frames_to_tensor(frames))
    ae.train(was_training)
    return z.reshape(z.shape[0], -1)


class SharedProjection(nn.Module):
    """Linear row-wise maps P_H (blueprint) and P_V (video features) into D_latent."""

    def __init__(self, d_eeg: int, d_vid: int, d_latent: int = 128, train_video_side: bool = False,
                 seed: int = 0):
        super().__init__()
        self.p_h = nn.Linear(d_eeg, d_latent, bias=False)
        self.p_v = nn.Linear(d_vid, d_latent, bias=False)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            q, _ = torch.linalg.qr(torch.randn(max(d_vid, d_latent), max(d_vid, d_latent), generator=gen))
            self.p_v.weight.copy_(q[:d_latent, :d_vid])
        self.p_v.weight.requires_grad_(train_video_side)

    @property
    def d_latent(self) -> int:
        return self.p_h.out_features


def project_shared(H_temp: torch.Tensor, V: torch.Tensor, pair: SharedProjection) -> tuple[torch.Tensor, torch.Tensor]:
    if H_temp.shape[-1] != pair.p_h.in_features:
        raise ValidationError(f"blueprint width {H_temp.shape[-1]} != P_H input {pair.p_h.in_features}")
    if V.shape[-1] != pair.p_v.in_features:
        raise ValidationError(f"video feature width {V.shape[-1]} != P_V input {pair.p_v.in_features}")
    return pair.p_h(H_temp), pair.p_v(V)


def _check_pair(Z_H: torch.Tensor, Z_V: torch.Tensor) -> None:
    if Z_H.shape != Z_V.shape:
        raise ValidationError(f"shape mismatch {tuple(Z_H.shape)} vs {tuple(Z_V.shape)}")


def content_loss(Z_H: torch.Tensor, Z_V: torch.Tensor) -> torch.Tensor:
    """(1/N) sum_i ||Z_H[i] - Z_V[i]||^2, averaged over any leading batch dims."""
    _check_pair(Z_H, Z_V)
    return ((Z_H - Z_V) ** 2).sum(dim=-1).mean()


def cosine_gram(Z: torch.Tensor) -> torch.Tensor:
    norms = Z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("zero-norm row in structural loss")
    U = Z / norms
    return U @ U.transpose(-1, -2)


def structural_loss(Z_H: torch.Tensor, Z_V: torch.Tensor) -> torch.Tensor:
    """(1/N^2) ||S_H - S_V||_F^2 of the intra-sequence cosine similarity matrices."""
    _check_pair(Z_H, Z_V)
    return ((cosine_gram(Z_H) - cosine_gram(Z_V)) ** 2).mean(dim=(-2, -1)).mean()


def tda_terms(Z_H: torch.Tensor, Z_V: torch.Tensor, drop_consistency: bool = False) -> dict[str, torch.Tensor]:
    l_hv = content_loss(Z_H, Z_V)
    l_struct = Z_H.new_zeros(()) if drop_consistency else structural_loss(Z_H, Z_V)
    return {"l_hv": l_hv, "l_struct": l_struct, "l_total": l_hv + l_struct}


def tda_loss(Z_H: torch.Tensor, Z_V: torch.Tensor, drop_consistency: bool = False) -> torch.Tensor:
    return tda_terms(Z_H, Z_V, drop_consistency)["l_total"]


@dataclass
class InversionHandle:
    """Frozen pieces of the video model needed to turn a clip into inverted latents."""

    autoencoder: FrameVAE
    denoiser: object = None
    schedule: object = None


def make_dgvr_target(video: VideoClip, handle: InversionHandle | None, steps: int = 0,
                     use_inversion: bool = True) -> torch.Tensor:
    """Per-frame latent target [N, D_vid]: encoded latents, optionally DDIM-inverted ``steps`` times."""
    if handle is None or handle.autoencoder is None:
        raise ConfigError("latent targets need the frame autoencoder")
    V = encode_video(handle.autoencoder, video)
    if not use_inversion or steps == 0:
        return V
    if handle.denoiser is None or handle.schedule is None:
        raise ConfigError("DDIM-inversion targets need a frozen denoiser and its schedule")
    from .dgvr import ddim_invert

    x0 = V.reshape(1, video.n_frames, *handle.autoencoder.latent_shape)
    xT = ddim_invert(handle.denoiser, x0, handle.schedule, steps)
    return xT.reshape(video.n_frames, -1)
