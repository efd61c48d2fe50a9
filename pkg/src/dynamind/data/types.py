from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains NaN or Inf")


@dataclass(frozen=True, eq=False)
class EEGRecording:
    """Multichannel EEG trial, ``data`` is [channels x samples]."""

    data: np.ndarray
    sample_rate_hz: float
    channel_names: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"EEG data must be a non-empty [C, T] matrix, got shape {data.shape}")
        _check_finite(data, "EEG data")
        if not self.sample_rate_hz > 0:
            raise ValidationError("sample_rate_hz must be positive")
        names = tuple(self.channel_names)
        if len(names) != data.shape[0]:
            raise ValidationError(f"{len(names)} channel names for {data.shape[0]} channels")
        if len(set(names)) != len(names):
            raise ValidationError("channel names must be unique")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class VideoClip:
    """Frames are [N, H, W, 3] with values in [0, 1]."""

    frames: np.ndarray
    fps: float = 3.0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValidationError(f"video frames must be [N, H, W, 3], got {frames.shape}")
        n, h, w, _ = frames.shape
        if n < 2 or h < 8 or w < 8:
            raise ValidationError(f"video needs N >= 2 and H, W >= 8, got {frames.shape[:3]}")
        _check_finite(frames, "video frames")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValidationError("video frame values must lie in [0, 1]")
        if not self.fps > 0:
            raise ValidationError("fps must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class TrialPair:
    trial_id: str
    eeg: EEGRecording
    video: VideoClip
    concept_id: int
    coarse_id: int
    emb_image: np.ndarray
    emb_text: np.ndarray
    emb_category: np.ndarray
    subject_id: int = 0
    # known latent trajectory [N, latent_dim]; only set by the synthetic generator
    latent_trajectory: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("emb_image", "emb_text", "emb_category"):
            vec = np.asarray(getattr(self, name))
            if vec.ndim != 1:
                raise ValidationError(f"{name} must be a vector")
            _check_finite(vec, f"{name} of trial {self.trial_id}")
            object.__setattr__(self, name, vec)


@dataclass(frozen=True)
class SyntheticWorldSpec:
    num_concepts: int = 40
    trials_per_concept: int = 10
    latent_dim: int = 8
    channels: int = 62
    samples: int = 96
    frames: int = 6
    height: int = 32
    width: int = 32
    forward_model_seed: int = 0
    noise_std: float = 0.1
    dim_image: int = 32
    dim_text: int = 32
    dim_category: int = 16
    sample_rate_hz: float = 200.0
    fps: float = 3.0

    def __post_init__(self):
        for name in ("num_concepts", "trials_per_concept", "latent_dim", "channels", "samples", "frames",
                     "dim_image", "dim_text", "dim_category"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.frames < 2 or self.height < 8 or self.width < 8:
            raise ValidationError("synthetic videos need >= 2 frames of at least 8x8")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be nonnegative")
