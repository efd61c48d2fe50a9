"""Regional-aware semantic mapper.

Per-region EEG encoders are fused into one feature, mapped to image/text/category
embedding predictions, aligned with contrastive and classification losses, and a
diffusion prior translates the concatenated predictions into the text-embedding space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data.tables import ConceptTable
from .diffusion import (NoiseSchedule, check_timesteps, ddim_timesteps, forward_noise, make_schedule,
                        timestep_embedding)
from .errors import ConfigError, NumericError, ValidationError


class SemanticTriple(NamedTuple):
    image: torch.Tensor
    text: torch.Tensor
    category: torch.Tensor


class RegionEncoder(nn.Module):
    """Two strided temporal convolutions, one self-attention layer, mean pool."""

    def __init__(self, in_channels: int, conv_width: int, out_dim: int, kernel_size: int = 7, heads: int = 1):
        super().__init__()
        pad = kernel_size // 2
        self.conv = nn.Sequential(
            nn.Conv1d(in_channels, conv_width, kernel_size, stride=2, padding=pad),
            nn.GELU(),
            nn.Conv1d(conv_width, conv_width, kernel_size, stride=2, padding=pad),
            nn.GELU(),
        )
        self.attn = nn.TransformerEncoderLayer(conv_width, heads, dim_feedforward=2 * conv_width, dropout=0.0,
                                               batch_first=True, norm_first=True)
        self.out = nn.Linear(conv_width, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x).transpose(1, 2)
        h = self.attn(h)
        return self.out(h.mean(dim=1))


class RegionalEncoderBank(nn.Module):
    def __init__(self, region_sizes: Sequence[int], per_region_dim: int = 512, fused_dim: int = 1024,
                 conv_width: int = 64, heads: int = 1, dropped: Sequence[int] = ()):
        super().__init__()
        self.region_sizes = list(region_sizes)
        self.per_region_dim = per_region_dim
        self.encoders = nn.ModuleList(RegionEncoder(c, conv_width, per_region_dim, heads=heads)
                                      for c in self.region_sizes)
        self.fuse = nn.Linear(len(self.region_sizes) * per_region_dim, fused_dim)
        self.dropped = set(dropped)

    @property
    def K(self) -> int:
        return len(self.region_sizes)

    def regional_features(self, blocks: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(blocks) != self.K:
            raise ConfigError(f"expected {self.K} region blocks, got {len(blocks)}")
        feats = []
        for k, (enc, block) in enumerate(zip(self.encoders, blocks)):
            if k in self.dropped:
                # masked region: output does not depend on the block at all
                feats.append(torch.zeros(block.shape[0], self.per_region_dim, dtype=block.dtype))
            else:
                feats.append(enc(block))
        return feats

    def concat(self, blocks: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.cat(self.regional_features(blocks), dim=-1)

    def forward(self, blocks: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fuse(self.concat(blocks))


class MappingHead(nn.Sequential):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__(nn.Linear(in_dim, 2 * out_dim), nn.GELU(), nn.Linear(2 * out_dim, out_dim))


class ModalityMapper(nn.Module):
    def __init__(self, fused_dim: int, dim_image: int, dim_text: int, dim_category: int):
        super().__init__()
        self.image = MappingHead(fused_dim, dim_image)
        self.text = MappingHead(fused_dim, dim_text)
        self.category = MappingHead(fused_dim, dim_category)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image[-1].out_features, self.text[-1].out_features, self.category[-1].out_features

    def forward(self, f: torch.Tensor) -> SemanticTriple:
        return SemanticTriple(self.image(f), self.text(f), self.category(f))


class RSMModel(nn.Module):
    """Encoder bank + modality heads + linear class probe on the category prediction."""

    def __init__(self, region_sizes: Sequence[int], dims: tuple[int, int, int], num_classes: int,
                 per_region_dim: int = 512, fused_dim: int = 1024, conv_width: int = 64, heads: int = 1,
                 dropped_regions: Sequence[int] = ()):
        super().__init__()
        self.bank = RegionalEncoderBank(region_sizes, per_region_dim, fused_dim, conv_width, heads,
                                        dropped=dropped_regions)
        self.mapper = ModalityMapper(fused_dim, *dims)
        self.class_head = nn.Linear(dims[2], num_classes)

    def forward(self, blocks: Sequence[torch.Tensor]) -> SemanticTriple:
        return self.mapper(self.bank(blocks))


def encode_regions(bank: RegionalEncoderBank, blocks: Sequence[torch.Tensor]) -> torch.Tensor:
    for b in blocks:
        if not torch.isfinite(b).all():
            raise ValidationError("region block contains NaN or Inf")
    return bank(blocks)


def map_to_modalities(mapper: ModalityMapper, f: torch.Tensor) -> SemanticTriple:
    return mapper(f)


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError(f"zero-norm row in {what}; cosine similarity is undefined")
    return x / norms


def info_nce(pred: torch.Tensor, target: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities; positives on the diagonal."""
    if pred.ndim != 2 or pred.shape != target.shape:
        raise ValidationError(f"info_nce needs matching [B, D] batches, got {tuple(pred.shape)} / {tuple(target.shape)}")
    if not tau > 0:
        raise ValidationError("temperature must be positive")
    logits = _unit_rows(pred, "predictions") @ _unit_rows(target, "targets").T / tau
    labels = torch.arange(pred.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def category_loss(c_hat_y: torch.Tensor, labels: torch.Tensor, head: nn.Module | None = None) -> torch.Tensor:
    """Mean cross-entropy; ``c_hat_y`` is taken as logits unless a projection head is given."""
    logits = head(c_hat_y) if head is not None else c_hat_y
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValidationError(f"label outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def build_prior_condition(triple: SemanticTriple) -> torch.Tensor:
    return torch.cat([triple.image, triple.text, triple.category], dim=-1)


def split_prior_condition(c_diff: torch.Tensor, dims: tuple[int, int, int]) -> SemanticTriple:
    a, b, _ = dims
    return SemanticTriple(c_diff[..., :a], c_diff[..., a:a + b], c_diff[..., a + b:])


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h, temb):
        return h + self.fc2(F.silu(self.fc1(self.norm(h + temb))))


class PriorModel(nn.Module):
    """Predicts the clean text embedding from (noisy text embedding, t, condition)."""

    def __init__(self, dim_text: int, cond_dim: int, hidden: int = 256, T_prior: int = 100,
                 beta_min: float = 1e-4, beta_max: float = 0.1, blocks: int = 3):
        super().__init__()
        self.dim_text = dim_text
        self.cond_dim = cond_dim
        self.schedule = make_schedule(T_prior, beta_min, beta_max)
        self.inp = nn.Linear(dim_text + cond_dim, hidden)
        self.time = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(_ResBlock(hidden) for _ in range(blocks))
        self.out = nn.Sequential(nn.LayerNorm(hidden), nn.Linear(hidden, dim_text))
        self.hidden = hidden

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        temb = self.time(timestep_embedding(t, self.hidden, self.schedule.T).to(x_t.dtype))
        h = self.inp(torch.cat([x_t, cond], dim=-1))
        for block in self.blocks:
            h = block(h, temb)
        return self.out(h)


def _schedule_of(prior, schedule: NoiseSchedule | None) -> NoiseSchedule:
    schedule = schedule or getattr(prior, "schedule", None)
    if schedule is None:
        raise ConfigError("prior has no noise schedule")
    return schedule


def prior_loss(prior, c_hat_diff: torch.Tensor, c_text: torch.Tensor, t, noise: torch.Tensor | None = None,
               generator: torch.Generator | None = None, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Mean over the batch of ||prior(x_t, t, cond) - c_text||^2 (clean-target prediction)."""
    schedule = _schedule_of(prior, schedule)
    t = check_timesteps(t, schedule.T)
    if noise is None:
        noise = torch.randn(c_text.shape, generator=generator, dtype=c_text.dtype)
    x_t = forward_noise(c_text, t, noise, schedule)
    t_b = t.reshape(-1).expand(c_text.shape[0]) if t.ndim == 0 else t
    pred = prior(x_t, t_b, c_hat_diff)
    return ((pred - c_text) ** 2).sum(dim=-1).mean()


@torch.no_grad()
def sample_prior(prior, c_hat_diff: torch.Tensor, steps: int, seed: int = 0,
                 schedule: NoiseSchedule | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic strided denoising from seeded Gaussian noise (or ``noise``) to a text-space embedding."""
    schedule = _schedule_of(prior, schedule)
    grid = ddim_timesteps(schedule.T, steps)
    shape = (c_hat_diff.shape[0], prior.dim_text)
    if noise is None:
        noise = torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)))
    elif tuple(noise.shape) != shape:
        raise ValidationError(f"noise {tuple(noise.shape)} does not match {shape}")
    x = noise.to(c_hat_diff.dtype)
    ab = schedule.alpha_bars.to(c_hat_diff.dtype)
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        t_b = torch.full((x.shape[0],), t_cur, dtype=torch.long)
        x0 = prior(x, t_b, c_hat_diff)
        eps = (x - ab[t_cur].sqrt() * x0) / (1 - ab[t_cur]).sqrt()
        x = ab[t_next].sqrt() * x0 + (1 - ab[t_next]).sqrt() * eps
    return x


@dataclass(frozen=True)
class AblationFlags:
    drop_image: bool = False
    drop_text: bool = False
    drop_category: bool = False

    @classmethod
    def from_feature(cls, feature: str | None) -> "AblationFlags":
        if feature in (None, "", "none"):
            return cls()
        if feature not in ("image", "text", "category"):
            raise ConfigError(f"unknown feature ablation '{feature}'")
        return cls(**{f"drop_{feature}": True})


def alignment_terms(triple: SemanticTriple, targets: SemanticTriple, labels: torch.Tensor, class_head: nn.Module,
                    tau: float = 0.07, prior_term: torch.Tensor | None = None,
                    flags: AblationFlags = AblationFlags()) -> dict[str, torch.Tensor]:
    zero = triple.text.new_zeros(())
    terms = {
        "info_image": zero if flags.drop_image else info_nce(triple.image, targets.image, tau),
        "info_text": zero if flags.drop_text else info_nce(triple.text, targets.text, tau),
        # the probe is always fitted; without the category term it cannot shape the encoder
        "category": category_loss(triple.category.detach() if flags.drop_category else triple.category,
                                  labels, class_head),
        "prior": zero if prior_term is None else prior_term,
    }
    return terms


def alignment_loss(triple: SemanticTriple, targets: SemanticTriple, labels: torch.Tensor, class_head: nn.Module,
                   tau: float = 0.07, prior_term: torch.Tensor | None = None,
                   flags: AblationFlags = AblationFlags()) -> torch.Tensor:
    terms = alignment_terms(triple, targets, labels, class_head, tau, prior_term, flags)
    return terms["info_image"] + terms["info_text"] + terms["category"] + terms["prior"]


def mask_condition(c_diff: torch.Tensor, dims: tuple[int, int, int], flags: AblationFlags) -> torch.Tensor:
    """Zero the slices of the prior condition whose feature is ablated."""
    parts = list(split_prior_condition(c_diff, dims))
    for i, drop in enumerate((flags.drop_image, flags.drop_text, flags.drop_category)):
        if drop:
            parts[i] = torch.zeros_like(parts[i])
    return torch.cat(parts, dim=-1)


# ---------------------------------------------------------------- direct classification

DIRECT_TASKS = {
    "40c_top1": ("concept", 1),
    "40c_top5": ("concept", 5),
    "9c_top1": ("coarse", 1),
    "9c_top3": ("coarse", 3),
    "color": ("color", 1),
    "fast_slow": ("fast_slow", 1),
    "numbers": ("numbers", 1),
    "human_face": ("human_face", 1),
    "human": ("human", 1),
}


@dataclass(frozen=True)
class AccuracyRecord:
    task: str
    k: int
    accuracy: float
    chance: float
    n: int


def _remap_probs(probs: np.ndarray, mapping: np.ndarray, n_labels: int) -> np.ndarray:
    out = np.zeros((probs.shape[0], n_labels))
    for concept, label in enumerate(mapping[:probs.shape[1]]):
        out[:, label] += probs[:, concept]
    return out


def classify_direct(probs: np.ndarray, labels: np.ndarray, task: str, table: ConceptTable) -> AccuracyRecord:
    """Top-k accuracy of concept probabilities, optionally remapped onto coarse/attribute labels.

    Remapped tasks sum concept probabilities within each target label. Chance is k / n_labels
    for the concept and coarse tasks and the largest-class share for attribute tasks.
    """
    if task not in DIRECT_TASKS:
        raise ValidationError(f"unknown classification task '{task}'")
    kind, k = DIRECT_TASKS[task]
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if kind == "concept":
        scores, y, n_labels = probs, labels, probs.shape[1]
        chance = min(k / n_labels, 1.0)
    else:
        mapping, values = table.label_map(kind)
        n_labels = len(values)
        scores, y = _remap_probs(probs, mapping, n_labels), mapping[labels]
        if kind == "coarse":
            chance = min(k / n_labels, 1.0)
        else:
            chance = float(np.bincount(y, minlength=n_labels).max() / len(y))
    k = min(k, n_labels)
    # stable ordering: ties resolved towards the lower label index
    topk = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    acc = float(np.mean([y[i] in topk[i] for i in range(len(y))])) if len(y) else 0.0
    return AccuracyRecord(task, k, acc, chance, len(y))
