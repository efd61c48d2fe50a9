"""Desk-scale paired EEG/video world with a known linear forward model.

Each concept owns a latent code and a drift direction. A trial is a short latent
trajectory around its concept code; frames render the trajectory as moving
Gaussian blobs and the EEG window ``i`` is a fixed linear image of ``z_i``.
Target embeddings are three fixed random projections of the concept code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .regions import load_region_map
from .tables import load_concept_table
from .types import EEGRecording, SyntheticWorldSpec, TrialPair, VideoClip

N_BLOBS = 2
_PARAMS_PER_BLOB = 6  # x, y, size, r, g, b

TRIAL_JITTER = 0.2
DRIFT_SCALE = 0.15
DRIFT_JITTER = 0.05
RENDER_GAIN = 1.5


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class SyntheticWorld:
    spec: SyntheticWorldSpec
    concept_codes: np.ndarray  # [num_concepts, L]
    concept_drift: np.ndarray  # [num_concepts, L]
    spatial: np.ndarray  # [C, L]
    temporal: np.ndarray  # [L, S] per-latent temporal profile inside one window
    render_proj: np.ndarray  # [N_BLOBS * 6, L]
    proj_image: np.ndarray
    proj_text: np.ndarray
    proj_category: np.ndarray

    @property
    def window_samples(self) -> int:
        return self.spec.samples // self.spec.frames

    def forward_matrix(self) -> np.ndarray:
        """Linear map from one latent state to the flattened [C, S] EEG window."""
        fm = self.spatial[:, None, :] * self.temporal.T[None, :, :]  # [C, S, L]
        return fm.reshape(-1, self.spec.latent_dim)

    def eeg_from_trajectory(self, traj: np.ndarray) -> np.ndarray:
        """Noise-free EEG [C, T] for a trajectory [N, L]; trailing samples beyond N*S are zero."""
        spec = self.spec
        s = self.window_samples
        windows = np.einsum("cl,ls,nl->ncs", self.spatial, self.temporal, traj)
        out = np.zeros((spec.channels, spec.samples))
        out[:, :spec.frames * s] = windows.transpose(1, 0, 2).reshape(spec.channels, -1)
        return out

    def render(self, traj: np.ndarray) -> np.ndarray:
        spec = self.spec
        yy, xx = np.meshgrid(np.arange(spec.height) + 0.5, np.arange(spec.width) + 0.5, indexing="ij")
        frames = np.full((len(traj), spec.height, spec.width, 3), 0.05)
        short = min(spec.height, spec.width)
        for i, z in enumerate(traj):
            p = _sigmoid(self.render_proj @ z).reshape(N_BLOBS, _PARAMS_PER_BLOB)
            for b in range(N_BLOBS):
                cx, cy = p[b, 0] * spec.width, p[b, 1] * spec.height
                sigma = (0.08 + 0.14 * p[b, 2]) * short
                blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
                frames[i] += 0.9 * blob[..., None] * p[b, 3:6]
        return np.clip(frames, 0.0, 1.0)

    def targets(self, concept: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        z = self.concept_codes[concept]
        return self.proj_image @ z, self.proj_text @ z, self.proj_category @ z


def build_world(spec: SyntheticWorldSpec) -> SyntheticWorld:
    if spec.samples < spec.frames:
        raise ValidationError("need at least one EEG sample per frame window")
    rng = np.random.default_rng(spec.forward_model_seed)
    L = spec.latent_dim
    s = spec.samples // spec.frames
    freqs = rng.integers(1, max(2, s // 2), size=L)
    phases = rng.uniform(0, 2 * np.pi, size=L)
    temporal = 1.0 + 0.5 * np.sin(2 * np.pi * freqs[:, None] * np.arange(s)[None, :] / s + phases[:, None])
    return SyntheticWorld(
        spec=spec,
        concept_codes=rng.standard_normal((spec.num_concepts, L)),
        concept_drift=DRIFT_SCALE * rng.standard_normal((spec.num_concepts, L)),
        spatial=rng.standard_normal((spec.channels, L)) / np.sqrt(L),
        temporal=temporal,
        render_proj=RENDER_GAIN * rng.standard_normal((N_BLOBS * _PARAMS_PER_BLOB, L)) / np.sqrt(L) * 2.0,
        proj_image=rng.standard_normal((spec.dim_image, L)) / np.sqrt(L),
        proj_text=rng.standard_normal((spec.dim_text, L)) / np.sqrt(L),
        proj_category=rng.standard_normal((spec.dim_category, L)) / np.sqrt(L),
    )


def synthetic_channel_names(n_channels: int) -> tuple[str, ...]:
    shipped = load_region_map("default")["channels"]
    if n_channels == len(shipped):
        return tuple(shipped)
    return tuple(f"ch{i}" for i in range(n_channels))


def generate_synthetic_dataset(spec: SyntheticWorldSpec, world: SyntheticWorld | None = None) -> list[TrialPair]:
    """Deterministic in ``spec`` (forward_model_seed fixes both the world and the trial draws)."""
    world = world or build_world(spec)
    table = load_concept_table()
    if spec.num_concepts > table.num_concepts:
        raise ValidationError(f"the concept table covers {table.num_concepts} concepts, asked for {spec.num_concepts}")
    rng = np.random.default_rng([spec.forward_model_seed, 1])
    names = synthetic_channel_names(spec.channels)
    offsets = np.arange(spec.frames) - (spec.frames - 1) / 2
    trials = []
    for concept in range(spec.num_concepts):
        c_img, c_txt, c_cat = world.targets(concept)
        for k in range(spec.trials_per_concept):
            jitter = TRIAL_JITTER * rng.standard_normal(spec.latent_dim)
            drift = world.concept_drift[concept] + DRIFT_JITTER * rng.standard_normal(spec.latent_dim)
            traj = world.concept_codes[concept] + jitter + offsets[:, None] * drift[None, :]
            eeg = world.eeg_from_trajectory(traj)
            if spec.noise_std > 0:
                eeg = eeg + spec.noise_std * rng.standard_normal(eeg.shape)
            frames = world.render(traj)
            trials.append(TrialPair(
                trial_id=f"c{concept:02d}_t{k:03d}",
                eeg=EEGRecording(eeg.astype(np.float32), spec.sample_rate_hz, names),
                video=VideoClip(frames.astype(np.float32), fps=spec.fps),
                concept_id=concept,
                coarse_id=table.coarse_of(concept),
                emb_image=c_img.astype(np.float32),
                emb_text=c_txt.astype(np.float32),
                emb_category=c_cat.astype(np.float32),
                latent_trajectory=traj,
            ))
    return trials
