"""Small frame- and clip-level concept classifiers trained from scratch on ground truth.

They stand in for the fine-tuned image and video backbones that score semantic
accuracy of reconstructions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import frames_to_tensor
from .data.types import TrialPair
from .errors import ClassifierTrainingError, ValidationError


def _trunk(width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, width, 3, stride=2, padding=1), nn.GELU(),
        nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.GELU(),
        nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.GELU(),
        nn.AdaptiveAvgPool2d(4), nn.Flatten(),
    )


class FrameClassifier(nn.Module):
    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.trunk = _trunk(width)
        self.head = nn.Linear(2 * width * 16, num_classes)

    def forward(self, x):  # [B, 3, H, W]
        return self.head(self.trunk(x))


class VideoClassifier(nn.Module):
    """Shared per-frame trunk, a temporal convolution over frame features, then mean over time."""

    def __init__(self, num_classes: int, width: int = 16, hidden: int = 128):
        super().__init__()
        self.trunk = _trunk(width)
        self.temporal = nn.Conv1d(2 * width * 16, hidden, 3, padding=1)
        self.head = nn.Linear(hidden, num_classes)

    def forward(self, x):  # [B, N, 3, H, W]
        b, n = x.shape[:2]
        h = self.trunk(x.flatten(0, 1)).reshape(b, n, -1).transpose(1, 2)
        return self.head(F.gelu(self.temporal(h)).mean(dim=-1))


@dataclass
class StubClassifiers:
    frame: FrameClassifier
    video: VideoClassifier
    num_classes: int
    train_accuracy: dict = field(default_factory=dict)

    @torch.no_grad()
    def frame_scores(self, frames: np.ndarray) -> np.ndarray:
        """[M, H, W, 3] -> [M, num_classes] softmax scores."""
        self.frame.eval()
        return F.softmax(self.frame(frames_to_tensor(frames)), dim=-1).numpy().astype(np.float64)

    @torch.no_grad()
    def video_scores(self, clips: np.ndarray) -> np.ndarray:
        """[B, N, H, W, 3] -> [B, num_classes] softmax scores."""
        self.video.eval()
        return F.softmax(self.video(frames_to_tensor(clips)), dim=-1).numpy().astype(np.float64)

    def as_pair(self):
        return self.frame_scores, self.video_scores


def _fit(model: nn.Module, x: torch.Tensor, y: torch.Tensor, *, epochs: int, lr: float, batch: int,
         gen: torch.Generator, target: float) -> float:
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    acc = 0.0
    for _ in range(epochs):
        model.train()
        order = torch.randperm(len(y), generator=gen)
        for i in range(0, len(y), batch):
            idx = order[i:i + batch]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = float(torch.cat([model(x[i:i + 256]).argmax(-1) for i in range(0, len(y), 256)]).eq(y)
                        .float().mean())
        if acc >= target:
            break
    return acc


def train_stub_classifiers(train_pairs: Sequence[TrialPair], num_classes: int = 40, *, seed: int = 0,
                           epochs: int = 60, lr: float = 3e-3, batch: int = 64,
                           min_accuracy: float = 0.9, stop_accuracy: float = 0.99) -> StubClassifiers:
    """Fit both classifiers on ground-truth frames/clips.

    Training stops early at ``stop_accuracy`` on the training data; ending below ``min_accuracy``
    is an error.
    """
    labels = np.array([p.concept_id for p in train_pairs], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValidationError("classifier training needs at least two classes")
    if labels.max() >= num_classes:
        raise ValidationError(f"label {labels.max()} outside [0, {num_classes})")
    clips = frames_to_tensor(np.stack([p.video.frames for p in train_pairs]))  # [B, N, 3, H, W]
    n_frames = clips.shape[1]
    y_clip = torch.as_tensor(labels)
    y_frame = y_clip.repeat_interleave(n_frames)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        frame_model = FrameClassifier(num_classes)
        video_model = VideoClassifier(num_classes)
    gen = torch.Generator().manual_seed(seed + 1)
    frame_acc = _fit(frame_model, clips.flatten(0, 1), y_frame, epochs=epochs, lr=lr, batch=batch, gen=gen,
                     target=stop_accuracy)
    video_acc = _fit(video_model, clips, y_clip, epochs=epochs, lr=lr, batch=max(1, batch // n_frames), gen=gen,
                     target=stop_accuracy)
    if frame_acc < min_accuracy or video_acc < min_accuracy:
        raise ClassifierTrainingError(
            f"stub classifiers reached train accuracy frame={frame_acc:.3f}, video={video_acc:.3f} "
            f"(< {min_accuracy}) after {epochs} epochs")
    return StubClassifiers(frame_model.eval(), video_model.eval(), num_classes,
                           {"frame": frame_acc, "video": video_acc})
