"""Experiment harness: phased training, evaluation and the ablation grid.

Phases run in the fixed order ae -> rsm -> prior -> inversion -> tda -> dgvr. Each phase
checkpoints after every epoch and resumes from its checkpoint; a phase only ever loads
checkpoints of phases that precede it. All randomness is drawn from generators seeded
by (run seed, phase, epoch), so a resumed run replays the uninterrupted one exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import FrameVAE, frames_to_tensor
from .checkpoint import (load_checkpoint, module_tensors, optimizer_tensors, restore_module, restore_optimizer,
                         save_checkpoint)
from .classifiers import FrameClassifier, StubClassifiers, VideoClassifier, train_stub_classifiers
from .config import RunConfig, from_flat, region_names, validate
from .data import (RegionPartition, SyntheticWorldSpec, TrialPair, VideoClip, generate_synthetic_dataset,
                   load_concept_table, load_dataset, partition_channels, partition_for, segment_temporal,
                   split_by_class_count, write_video)
from .data.tables import ConceptTable
from .dgvr import GuidanceBundle, VideoDenoiser, ddim_invert, decode_video, dgvr_loss, sample
from .diffusion import make_schedule, sample_timesteps
from .errors import ConfigError, DivergenceError, DynaMindError, MissingArtifactError, ValidationError
from .metrics import EvalReport, evaluate_reconstructions
from .rsm import (DIRECT_TASKS, AblationFlags, PriorModel, RSMModel, SemanticTriple, alignment_terms,
                  build_prior_condition, classify_direct, mask_condition, prior_loss, sample_prior)
from .tda import BlueprintTCN, SharedProjection, project_shared, tda_terms

PHASES = ("ae", "rsm", "prior", "inversion", "tda", "dgvr")
OUT_ENV = "DYNAMIND_OUT"
EpochHook = Callable[[str, int], None]


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def cosine_lr(base: float, epoch: int, total: int) -> float:
    """Cosine annealing from ``base`` at epoch 0 towards 0 at ``total``."""
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(total, 1)))


def resolve_out_root(cfg: RunConfig, cli_out: str | None = None) -> Path:
    return Path(cli_out or os.environ.get(OUT_ENV) or cfg.out_dir)


def run_dir_for(cfg: RunConfig, out_root: str | Path) -> Path:
    return Path(out_root) / f"{cfg.name}-s{cfg.seed}-{cfg.fingerprint()}"


# ---------------------------------------------------------------- data

@dataclass
class Corpus:
    trials: list[TrialPair]
    train: list[TrialPair]
    test: list[TrialPair]
    partition: RegionPartition
    table: ConceptTable
    num_classes: int

    @property
    def dims(self) -> tuple[int, int, int]:
        t = self.trials[0]
        return len(t.emb_image), len(t.emb_text), len(t.emb_category)

    def test_for(self, class_count: int) -> list[TrialPair]:
        keep = set(sorted({t.concept_id for t in self.trials})[:class_count])
        return [t for t in self.test if t.concept_id in keep]


def build_corpus(cfg: RunConfig) -> Corpus:
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticWorldSpec(num_concepts=d.num_concepts, trials_per_concept=d.trials_per_concept,
                                  latent_dim=d.latent_dim, channels=d.channels, samples=d.samples, frames=d.frames,
                                  height=d.height, width=d.width, forward_model_seed=d.forward_model_seed,
                                  noise_std=d.noise_std, fps=d.fps)
        trials = generate_synthetic_dataset(spec)
    else:
        trials = load_dataset(d.source, workers=d.load_workers)
    if not trials:
        raise ConfigError("the dataset is empty")
    n_concepts = len({t.concept_id for t in trials})
    train, test = split_by_class_count(trials, n_concepts, d.holdout_fraction, seed=d.split_seed)
    partition = partition_for(trials[0].eeg.channel_names, d.region_map)
    num_classes = max(t.concept_id for t in trials) + 1
    return Corpus(trials, train, test, partition, load_concept_table(), num_classes)


def _blocks(trials: Sequence[TrialPair], partition: RegionPartition) -> list[torch.Tensor]:
    per_trial = [partition_channels(t.eeg, partition) for t in trials]
    return [torch.as_tensor(np.stack([p[k] for p in per_trial]), dtype=torch.float32) for k in range(partition.K)]


def _windows(trials: Sequence[TrialPair], n: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.stack(segment_temporal(t.eeg, n)) for t in trials]), dtype=torch.float32)


def _targets(trials: Sequence[TrialPair]) -> SemanticTriple:
    return SemanticTriple(*(torch.as_tensor(np.stack([getattr(t, a) for t in trials]), dtype=torch.float32)
                            for a in ("emb_image", "emb_text", "emb_category")))


def _labels(trials: Sequence[TrialPair]) -> torch.Tensor:
    return torch.as_tensor([t.concept_id for t in trials], dtype=torch.long)


def _clips(trials: Sequence[TrialPair]) -> torch.Tensor:
    return frames_to_tensor(np.stack([t.video.frames for t in trials]))


def _batches(n: int, size: int, gen: torch.Generator) -> list[torch.Tensor]:
    order = torch.randperm(n, generator=gen)
    return [order[i:i + size] for i in range(0, n, size)]


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad()
    loss.backward()
    opt.step()


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, n: int, **values: float) -> None:
        self.count += n
        for k, v in values.items():
            v = v.detach().item() if torch.is_tensor(v) else float(v)
            self.sums[k] = self.sums.get(k, 0.0) + v * n

    def mean(self) -> dict[str, float]:
        return {k: v / max(self.count, 1) for k, v in self.sums.items()}


def write_loss_csv(path: Path, columns: Sequence[str], curve: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in curve:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in columns[1:]])


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    run_id: str
    run_dir: str
    config: dict
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    status: str = "running"

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / "run_manifest.json"

    def save(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return self.path

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / "run_manifest.json"
        if not path.is_file():
            raise MissingArtifactError(f"run manifest not found: {path}")
        return cls(**json.loads(path.read_text()))

    def missing_artifacts(self) -> list[str]:
        paths = list(self.checkpoints.values()) + list(self.reports.values())
        return [p for p in paths if not (Path(self.run_dir) / p).exists()]


# ---------------------------------------------------------------- pipeline

class Pipeline:
    """Owns one run directory: builds, trains, loads and samples the phase models."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path, corpus: Corpus | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.corpus = corpus or build_corpus(cfg)
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.log_dir = self.run_dir / "logs"
        self._cache: dict[str, nn.Module] = {}
        self._current: str | None = None
        self.flags = AblationFlags.from_feature(cfg.ablation.drop_feature)
        self.dgvr_schedule = make_schedule(cfg.dgvr.T_steps, cfg.dgvr.beta_min, cfg.dgvr.beta_max)

    # ---- geometry
    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.cfg.ae.latent_channels, self.cfg.data.height // 8, self.cfg.data.width // 8

    @property
    def d_vid(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def cond_dim(self) -> int:
        dims = self.corpus.dims
        return dims[1] if self.cfg.dgvr.condition_source == "prior_sample" else sum(dims)

    def active_phases(self) -> list[str]:
        skip = set()
        if self.cfg.rsm.joint_prior:
            skip.add("prior")
        if not self.cfg.tda.use_inversion:
            skip.add("inversion")
        return [p for p in PHASES if p not in skip]

    def dropped_regions(self) -> list[int]:
        name = self.cfg.ablation.drop_region
        if name is None:
            return []
        names = list(self.corpus.partition.names)
        if name not in names:
            raise ConfigError(f"region '{name}' not in partition {names}")
        return [names.index(name)]

    # ---- module factories; initial weights depend only on (seed, phase)
    def _seeded(self, tag: str, factory: Callable[[], nn.Module]) -> nn.Module:
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.cfg.seed, "init", tag))
            return factory()

    def new_model(self, phase: str) -> nn.Module:
        c, d = self.cfg, self.corpus
        if phase == "ae":
            return self._seeded(phase, lambda: FrameVAE(c.ae.latent_channels, c.ae.width, c.data.height, c.data.width))
        if phase == "rsm":
            def build():
                parts = {"rsm": RSMModel(d.partition.sizes, d.dims, d.num_classes, c.rsm.per_region_dim,
                                         c.rsm.fused_dim, c.rsm.conv_width, c.rsm.heads, self.dropped_regions())}
                if c.rsm.joint_prior:
                    parts["prior"] = self._new_prior()
                return nn.ModuleDict(parts)
            return self._seeded(phase, build)
        if phase == "prior":
            return self._seeded(phase, self._new_prior)
        if phase == "inversion":
            return self._seeded(phase, lambda: VideoDenoiser(self.latent_shape, c.tda.d_latent, 1, c.dgvr.base_width,
                                                             c.dgvr.T_steps, c.dgvr.cond_tokens))
        if phase == "tda":
            return self._seeded(phase, lambda: nn.ModuleDict({
                "tcn": BlueprintTCN(d.trials[0].eeg.n_channels, c.tda.width, c.tda.d_eeg),
                "proj": SharedProjection(c.tda.d_eeg, self.d_vid, c.tda.d_latent, c.tda.train_video_side,
                                         seed=derive_seed(c.seed, "p_v")),
            }))
        if phase == "dgvr":
            return self._seeded(phase, lambda: VideoDenoiser(self.latent_shape, c.tda.d_latent, self.cond_dim,
                                                             c.dgvr.base_width, c.dgvr.T_steps, c.dgvr.cond_tokens))
        raise ValidationError(f"unknown phase '{phase}'")

    def _new_prior(self) -> PriorModel:
        p, dims = self.cfg.prior, self.corpus.dims
        return PriorModel(dims[1], sum(dims), p.hidden, p.T_steps, p.beta_min, p.beta_max)

    def ckpt_path(self, phase: str) -> Path:
        return self.ckpt_dir / f"{phase}.ckpt"

    def epochs_of(self, phase: str) -> int:
        c = self.cfg
        return {"ae": c.ae.epochs, "rsm": c.rsm.epochs, "prior": c.prior.epochs, "inversion": c.tda.inversion_epochs,
                "tda": c.tda.epochs, "dgvr": c.dgvr.epochs}[phase]

    def load(self, phase: str) -> nn.Module:
        """Frozen, fully trained module of an earlier phase."""
        if self._current is not None and PHASES.index(phase) >= PHASES.index(self._current):
            raise ConfigError(f"phase '{self._current}' may not read the '{phase}' checkpoint")
        if phase == "prior" and self.cfg.rsm.joint_prior:
            return self.load("rsm")["prior"]
        if phase in self._cache:
            return self._cache[phase]
        tensors, meta = load_checkpoint(self.ckpt_path(phase))
        if meta.get("fingerprint") != self.cfg.fingerprint():
            raise ConfigError(f"{self.ckpt_path(phase)} was written by a different configuration")
        if meta["epoch"] != self.epochs_of(phase):
            raise MissingArtifactError(f"phase '{phase}' is incomplete ({meta['epoch']}/{self.epochs_of(phase)} epochs)")
        model = self.new_model(phase)
        restore_module("model", model, tensors)
        self._cache[phase] = _freeze(model)
        return self._cache[phase]

    # ---- generic epoch loop
    def _run_phase(self, phase: str, model: nn.Module, epoch_fn, columns: Sequence[str],
                   hook: EpochHook | None = None) -> list[dict]:
        cfg_lr = {"ae": self.cfg.ae.lr, "rsm": self.cfg.rsm.lr, "prior": self.cfg.prior.lr,
                  "inversion": self.cfg.dgvr.lr, "tda": self.cfg.tda.lr, "dgvr": self.cfg.dgvr.lr}[phase]
        epochs = self.epochs_of(phase)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=cfg_lr)
        path = self.ckpt_path(phase)
        start, curve = 0, []
        if path.exists():
            tensors, meta = load_checkpoint(path)
            if meta.get("fingerprint") != self.cfg.fingerprint():
                raise ConfigError(f"{path} was written by a different configuration")
            restore_module("model", model, tensors)
            restore_optimizer("optim", opt, tensors)
            start, curve = meta["epoch"], meta["curve"]
        elif epochs == 0:
            self._save(phase, model, opt, 0, curve)
        for epoch in range(start, epochs):
            for group in opt.param_groups:
                group["lr"] = cosine_lr(cfg_lr, epoch, epochs)
            gen = torch.Generator().manual_seed(derive_seed(self.cfg.seed, phase, "epoch", epoch))
            model.train()
            logs = epoch_fn(epoch, gen, opt)
            if not all(math.isfinite(v) for v in logs.values()):
                raise DivergenceError(phase, epoch + 1, f"non-finite loss {logs}; last good checkpoint kept at {path}")
            curve.append({"epoch": epoch + 1, **logs})
            self._save(phase, model, opt, epoch + 1, curve)
            write_loss_csv(self.log_dir / f"{phase}_losses.csv", columns, curve)
            if hook is not None:
                hook(phase, epoch + 1)
        write_loss_csv(self.log_dir / f"{phase}_losses.csv", columns, curve)
        _freeze(model)
        self._cache[phase] = model
        return curve

    def _save(self, phase, model, opt, epoch, curve):
        tensors = {**module_tensors("model", model), **optimizer_tensors("optim", opt)}
        meta = {"phase": phase, "epoch": epoch, "epochs": self.epochs_of(phase), "curve": curve,
                "fingerprint": self.cfg.fingerprint(), "config": self.cfg.to_flat()}
        save_checkpoint(self.ckpt_path(phase), tensors, meta)

    # ---- derived tensors
    @torch.no_grad()
    def latents(self, trials: Sequence[TrialPair]) -> torch.Tensor:
        """Encoded clips, [B, N, c, h, w]."""
        ae = self.load("ae")
        clips = _clips(trials)
        return ae.encode(clips.flatten(0, 1)).reshape(len(trials), clips.shape[1], *self.latent_shape)

    @torch.no_grad()
    def tda_targets(self, trials: Sequence[TrialPair]) -> torch.Tensor:
        """Per-frame TDA targets [B, N, D_vid]: encoded latents or their DDIM inversions."""
        x0 = self.latents(trials)
        if self.cfg.tda.use_inversion:
            den = self.load("inversion")
            x0 = torch.cat([ddim_invert(den, x0[i:i + 32], self.dgvr_schedule, self.cfg.tda.inversion_steps)
                            for i in range(0, len(x0), 32)])
        return x0.flatten(2)

    @torch.no_grad()
    def prior_condition(self, trials: Sequence[TrialPair]) -> torch.Tensor:
        rsm = self.load("rsm")["rsm"]
        cd = build_prior_condition(rsm(_blocks(trials, self.corpus.partition)))
        return mask_condition(cd, self.corpus.dims, self.flags)

    @torch.no_grad()
    def semantic(self, trials: Sequence[TrialPair], seed: int | None = None) -> torch.Tensor:
        cd = self.prior_condition(trials)
        if self.cfg.dgvr.condition_source == "diff_concat":
            return cd
        seed = self.cfg.seed if seed is None else seed
        noise = torch.stack([torch.randn(self.corpus.dims[1], generator=torch.Generator().manual_seed(
            derive_seed(seed, "prior-noise", t.trial_id))) for t in trials])
        return sample_prior(self.load("prior"), cd, self.cfg.prior.sample_steps, noise=noise)

    @torch.no_grad()
    def blueprint(self, trials: Sequence[TrialPair]) -> torch.Tensor:
        """Projected blueprint Z_H = P_H(H_temp), [B, N, D_latent]."""
        tda = self.load("tda")
        return tda["proj"].p_h(tda["tcn"](_windows(trials, self.cfg.data.frames)))

    # ---- phases
    def train_ae(self, hook=None):
        ae = self.new_model("ae")
        frames = _clips(self.corpus.train).flatten(0, 1)
        c = self.cfg.ae

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(frames), c.batch_size, gen):
                loss, parts = ae.loss(frames[idx], gen, c.kl_weight)
                _step(opt, loss)
                meter.add(len(idx), loss=loss, **parts)
            ae.calibrate_scale(frames)
            return meter.mean()

        if self.epochs_of("ae") == 0 and not self.ckpt_path("ae").exists():
            ae.calibrate_scale(frames)
        return self._run_phase("ae", ae, epoch, ("epoch", "loss", "recon", "kl"), hook)

    def train_rsm(self, hook=None):
        model = self.new_model("rsm")
        rsm = model["rsm"]
        trials = self.corpus.train
        blocks, targets, labels = _blocks(trials, self.corpus.partition), _targets(trials), _labels(trials)
        c = self.cfg.rsm

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(trials), c.batch_size, gen):
                triple = rsm([b[idx] for b in blocks])
                prior_term = None
                if c.joint_prior:
                    cd = mask_condition(build_prior_condition(triple), self.corpus.dims, self.flags)
                    t = sample_timesteps(len(idx), model["prior"].schedule.T, gen)
                    prior_term = prior_loss(model["prior"], cd, targets.text[idx], t, generator=gen)
                terms = alignment_terms(triple, SemanticTriple(*(x[idx] for x in targets)), labels[idx],
                                        rsm.class_head, c.tau, prior_term, self.flags)
                loss = terms["info_image"] + terms["info_text"] + terms["category"] + terms["prior"]
                _step(opt, loss)
                meter.add(len(idx), **terms, total=loss)
            return meter.mean()

        return self._run_phase("rsm", model, epoch,
                               ("epoch", "info_image", "info_text", "category", "prior", "total"), hook)

    def train_prior(self, hook=None):
        self._current = "prior"
        cd = self.prior_condition(self.corpus.train)
        text = _targets(self.corpus.train).text
        prior = self.new_model("prior")
        c = self.cfg.prior

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(text), c.batch_size, gen):
                t = sample_timesteps(len(idx), prior.schedule.T, gen)
                loss = prior_loss(prior, cd[idx], text[idx], t, generator=gen)
                _step(opt, loss)
                meter.add(len(idx), prior=loss)
            return meter.mean()

        return self._run_phase("prior", prior, epoch, ("epoch", "prior"), hook)

    def train_inversion(self, hook=None):
        self._current = "inversion"
        x0 = self.latents(self.corpus.train)
        den = self.new_model("inversion")
        c = self.cfg.dgvr

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(x0), c.batch_size, gen):
                loss = dgvr_loss(den, x0[idx], GuidanceBundle(alpha=0.0), self.dgvr_schedule, gen)
                _step(opt, loss)
                meter.add(len(idx), dgvr=loss)
            return meter.mean()

        return self._run_phase("inversion", den, epoch, ("epoch", "dgvr"), hook)

    def train_tda(self, hook=None):
        self._current = "tda"
        trials = self.corpus.train
        V = self.tda_targets(trials)
        windows = _windows(trials, self.cfg.data.frames)
        model = self.new_model("tda")
        c = self.cfg.tda
        drop = self.cfg.ablation.drop_consistency

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(trials), c.batch_size, gen):
                Z_H, Z_V = project_shared(model["tcn"](windows[idx]), V[idx], model["proj"])
                terms = tda_terms(Z_H, Z_V, drop_consistency=drop)
                _step(opt, terms["l_total"])
                meter.add(len(idx), **terms)
            return meter.mean()

        return self._run_phase("tda", model, epoch, ("epoch", "l_hv", "l_struct", "l_total"), hook)

    def train_dgvr(self, hook=None):
        self._current = "dgvr"
        trials = self.corpus.train
        x0 = self.latents(trials)
        fit_target = self.tda_targets(trials).reshape(x0.shape)
        z_b = self.blueprint(trials)
        sem = self.semantic(trials)
        den = self.new_model("dgvr")
        if not self.ckpt_path("dgvr").exists():
            self._init_upsampler(den)
        c = self.cfg.dgvr

        def epoch(e, gen, opt):
            meter = _Meter()
            for idx in _batches(len(trials), c.batch_size, gen):
                guidance = GuidanceBundle(sem[idx], z_b[idx], c.alpha)
                l_dgvr = dgvr_loss(den, x0[idx], guidance, self.dgvr_schedule, gen)
                l_fit = ((den.upsampler(z_b[idx]) - fit_target[idx]) ** 2).mean()
                loss = l_dgvr + c.upsampler_fit_weight * l_fit
                _step(opt, loss)
                meter.add(len(idx), dgvr=l_dgvr, fit=l_fit, total=loss)
            return meter.mean()

        return self._run_phase("dgvr", den, epoch, ("epoch", "dgvr", "fit", "total"), hook)

    @torch.no_grad()
    def _init_upsampler(self, den: VideoDenoiser) -> None:
        """Start U at P_V^T, the exact inverse of the frozen orthogonal video projection, when shapes allow."""
        p_v = self.load("tda")["proj"].p_v.weight  # [D_latent, D_vid]
        if p_v.shape[0] == p_v.shape[1]:
            den.upsampler.proj.weight.copy_(p_v.T)
            den.upsampler.proj.bias.zero_()

    def train_all(self, hook: EpochHook | None = None) -> dict[str, float]:
        clock = {}
        for phase in self.active_phases():
            start = time.perf_counter()
            self._current = phase
            getattr(self, f"train_{phase}")(hook)
            self._current = None
            clock[phase] = round(time.perf_counter() - start, 3)
        return clock

    # ---- generation
    @torch.no_grad()
    def generate(self, trials: Sequence[TrialPair], *, alpha: float | None = None, seed: int | None = None,
                 batch: int = 32) -> list[VideoClip]:
        c = self.cfg.dgvr
        alpha = c.alpha if alpha is None else alpha
        seed = self.cfg.seed if seed is None else seed
        ae, den = self.load("ae"), self.load("dgvr")
        out = []
        for i in range(0, len(trials), batch):
            chunk = trials[i:i + batch]
            shape = (len(chunk), self.cfg.data.frames, *self.latent_shape)
            noise = torch.stack([torch.randn(shape[1:], generator=torch.Generator().manual_seed(
                derive_seed(seed, "x_T", t.trial_id))) for t in chunk])
            guidance = GuidanceBundle(self.semantic(chunk, seed), self.blueprint(chunk), alpha)
            x0 = sample(den, guidance, self.dgvr_schedule, shape, sampler=c.sampler, steps=c.sample_steps,
                        seed=derive_seed(seed, "sampler", i), noise=noise)
            out.extend(decode_video(ae, x, self.cfg.data.fps) for x in x0)
        return out

    @torch.no_grad()
    def concept_probs(self, trials: Sequence[TrialPair]) -> np.ndarray:
        rsm = self.load("rsm")["rsm"]
        triple = rsm(_blocks(trials, self.corpus.partition))
        return torch.softmax(rsm.class_head(triple.category), dim=-1).double().numpy()

    def classifiers(self) -> StubClassifiers:
        """Stub evaluation classifiers, trained once on every ground-truth clip and cached."""
        path = self.ckpt_dir / "classifiers.ckpt"
        n = self.corpus.num_classes
        if path.exists():
            tensors, meta = load_checkpoint(path)
            frame, video = FrameClassifier(n), VideoClassifier(n)
            restore_module("frame", frame, tensors)
            restore_module("video", video, tensors)
            return StubClassifiers(frame.eval(), video.eval(), n, meta["train_accuracy"])
        clf = train_stub_classifiers(self.corpus.trials, n, seed=derive_seed(self.cfg.seed, "classifiers"),
                                     epochs=self.cfg.eval.classifier_epochs)
        save_checkpoint(path, {**module_tensors("frame", clf.frame), **module_tensors("video", clf.video)},
                        {"train_accuracy": clf.train_accuracy, "fingerprint": self.cfg.fingerprint()})
        return clf


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, out_root: str | Path | None = None, *, hook: EpochHook | None = None) -> RunManifest:
    torch.set_num_threads(cfg.threads)
    run_dir = run_dir_for(cfg, resolve_out_root(cfg) if out_root is None else out_root)
    pipe = Pipeline(cfg, run_dir)
    manifest = RunManifest(run_dir.name, str(run_dir), cfg.to_flat())
    manifest.save()
    manifest.wall_clock = pipe.train_all(hook)
    manifest.checkpoints = {p: str(pipe.ckpt_path(p).relative_to(run_dir)) for p in pipe.active_phases()}
    manifest.reports["losses"] = "logs"
    manifest.status = "trained"
    manifest.save()
    return manifest


def _ckpt_ids(pipe: Pipeline) -> dict[str, str]:
    return {p: hashlib.sha256(pipe.ckpt_path(p).read_bytes()).hexdigest()[:12] for p in pipe.active_phases()}


def _frame_grid(gt: VideoClip, gen: VideoClip) -> np.ndarray:
    """Two rows (ground truth, generated) of frames separated by 1-pixel white gutters."""
    n, h, w, _ = gt.frames.shape
    grid = np.ones((2 * h + 3, n * (w + 1) + 1, 3))
    for r, clip in enumerate((gt, gen)):
        for i, frame in enumerate(clip.frames):
            grid[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + i * (w + 1): 1 + i * (w + 1) + w] = frame
    return grid


def save_png(path: Path, image: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mpimg

    path.parent.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(path, np.clip(image, 0, 1), metadata={"Software": None})


def cmd_evaluate(run: RunManifest | str | Path, class_counts: Sequence[int] | None = None, *,
                 alpha: float | None = None, sample_seed: int | None = None, stem: str = "report",
                 write_clips: bool = True) -> dict[str, Path]:
    """Sample held-out reconstructions, score them per class count and write the report files."""
    manifest = run if isinstance(run, RunManifest) else RunManifest.load(run)
    cfg = from_flat(manifest.config)
    validate(cfg)
    torch.set_num_threads(cfg.threads)
    counts = list(cfg.eval.class_counts if class_counts is None else class_counts)
    if not counts:
        raise ValidationError("class_counts must not be empty")
    run_dir = Path(manifest.run_dir)
    pipe = Pipeline(cfg, run_dir)
    for n in counts:
        if not 1 <= n <= len({t.concept_id for t in pipe.corpus.trials}):
            raise ValidationError(f"class count {n} outside the available concepts")
    for phase in pipe.active_phases():
        if not pipe.ckpt_path(phase).exists():
            raise MissingArtifactError(f"missing checkpoint for phase '{phase}': {pipe.ckpt_path(phase)}")
    seed = cfg.seed if sample_seed is None else sample_seed
    alpha_used = cfg.dgvr.alpha if alpha is None else alpha

    test = sorted(pipe.corpus.test_for(max(counts)), key=lambda t: t.trial_id)
    generated = dict(zip((t.trial_id for t in test), pipe.generate(test, alpha=alpha_used, seed=seed)))
    clf = pipe.classifiers()

    report = EvalReport(meta={"run_id": manifest.run_id, "alpha": alpha_used, "sample_seed": seed,
                              "sampler": cfg.dgvr.sampler, "steps": cfg.dgvr.sample_steps,
                              "classifier_train_accuracy": clf.train_accuracy,
                              "std_sources": {"semantic": f"{cfg.eval.repeats} distractor draws",
                                              "SSIM": "clips", "FVMD": "single pooled estimate"}})
    for n in sorted(counts):
        subset = pipe.corpus.test_for(n)
        subset = sorted(subset, key=lambda t: t.trial_id)
        part = evaluate_reconstructions([t.video for t in subset], [generated[t.trial_id] for t in subset],
                                        [t.concept_id for t in subset], clf.as_pair(),
                                        np.random.default_rng(derive_seed(cfg.seed, "eval", n)), class_count=n,
                                        ways=[w for w in cfg.eval.ways if w <= clf.num_classes],
                                        repeats=cfg.eval.repeats)
        report.extend(part)

    eval_dir = run_dir / "eval"
    csv_path, json_path = report.save(eval_dir, stem)
    paths = {"report_csv": csv_path, "report_json": json_path}

    probs = pipe.concept_probs(test)
    labels = np.array([t.concept_id for t in test])
    cls_path = eval_dir / f"{stem}_classification.csv"
    with open(cls_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "k", "accuracy", "chance", "n"])
        for task in DIRECT_TASKS:
            rec = classify_direct(probs, labels, task, pipe.corpus.table)
            writer.writerow([rec.task, rec.k, repr(rec.accuracy), repr(rec.chance), rec.n])
    paths["classification_csv"] = cls_path

    if write_clips:
        ids = _ckpt_ids(pipe)
        for i, t in enumerate(test):
            clip = generated[t.trial_id]
            write_video(eval_dir / "clips" / f"{t.trial_id}.f32", clip)
            (eval_dir / "clips" / f"{t.trial_id}.json").write_text(json.dumps(
                {"trial_id": t.trial_id, "seed": seed, "alpha": alpha_used, "steps": cfg.dgvr.sample_steps,
                 "sampler": cfg.dgvr.sampler, "checkpoints": ids}, indent=1, sort_keys=True))
            if i < cfg.eval.grid_clips:
                save_png(eval_dir / "grids" / f"{t.trial_id}.png", _frame_grid(t.video, clip))
        paths["clips"] = eval_dir / "clips"
        if cfg.eval.grid_clips:
            paths["grids"] = eval_dir / "grids"

    if stem == "report":
        manifest.reports.update({k: str(Path(v).relative_to(run_dir)) for k, v in paths.items()})
        manifest.status = "evaluated"
        manifest.save()
    return paths


# ---------------------------------------------------------------- ablations

def ablation_grid(cfg: RunConfig) -> list[tuple[str, dict]]:
    """Full model, then one run per removed region, per removed feature, and without consistency."""
    grid = [("Full", {})]
    grid += [(f"w/o {r.capitalize()}", {"ablation.drop_region": r}) for r in region_names(cfg)]
    grid += [(f"w/o {f.capitalize()}", {"ablation.drop_feature": f}) for f in ("image", "text", "category")]
    grid.append(("w/o Consistency", {"ablation.drop_consistency": True}))
    return grid


def config_diff(a: RunConfig, b: RunConfig, ignore: Sequence[str] = ("name",)) -> dict[str, tuple]:
    fa, fb = a.to_flat(), b.to_flat()
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k] and k not in ignore}


ABLATION_COLUMNS = ("40-c top-1", "9-c top-1", "video 2-way", "video 40-way", "FVMD", "frame 2-way",
                    "frame 40-way", "SSIM")


def _ablation_row(label: str, run_dir: Path, class_count: int) -> dict[str, str]:
    report = EvalReport.from_json((run_dir / "eval" / "report.json").read_text())
    cls_text = (run_dir / "eval" / "report_classification.csv").read_text()
    cls = {r["task"]: float(r["accuracy"]) for r in csv.DictReader(cls_text.splitlines())}
    row = {"run": label}
    if label == "w/o Consistency":
        row["40-c top-1"] = row["9-c top-1"] = "-"
    else:
        row["40-c top-1"] = f"{100 * cls['40c_top1']:.2f}"
        row["9-c top-1"] = f"{100 * cls['9c_top1']:.2f}"
    ways = sorted({int(r.metric.split("-")[0]) for r in report.rows if r.metric.endswith("-way")})
    big = ways[-1] if ways else 40
    for basis in ("video", "frame"):
        for name, metric in (("2-way", "2-way"), ("40-way", f"{big}-way")):
            try:
                row[f"{basis} {name}"] = f"{report.cell(class_count, basis, metric).mean:.3f}"
            except KeyError:
                row[f"{basis} {name}"] = "-"
    row["FVMD"] = f"{report.cell(class_count, 'video', 'FVMD').mean:.2f}"
    row["SSIM"] = f"{report.cell(class_count, 'frame', 'SSIM').mean:.3f}"
    return row


def cmd_ablate(base: RunConfig, out_root: str | Path | None = None, *, class_count: int | None = None,
               runner: Callable[[RunConfig, Path], Path] | None = None) -> dict[str, Path]:
    """Train and evaluate every grid entry as an independent seeded run; failures are reported, not fatal."""
    out_root = resolve_out_root(base) if out_root is None else Path(out_root)
    class_count = class_count or max(base.eval.class_counts)
    grid = ablation_grid(base)
    rows, runs = [], []
    for label, diff in grid:
        slug = label.lower().replace("w/o ", "wo-").replace(" ", "-")
        cfg = base.replace(**diff, name=f"{base.name}-{slug}")
        changed = config_diff(base, cfg)
        if len(changed) != len(diff) or len(diff) > 1:
            raise ConfigError(f"ablation '{label}' differs from the base in {sorted(changed)}")
        try:
            if runner is not None:
                run_dir = runner(cfg, out_root)
            else:
                manifest = cmd_train(cfg, out_root)
                cmd_evaluate(manifest, [class_count])
                run_dir = Path(manifest.run_dir)
            rows.append(_ablation_row(label, run_dir, class_count))
            runs.append({"label": label, "run_dir": str(run_dir), "diff": {k: v[1] for k, v in changed.items()},
                         "status": "ok"})
        except DynaMindError as exc:
            rows.append({"run": label, **{c: f"FAILED: {type(exc).__name__}" for c in ABLATION_COLUMNS}})
            runs.append({"label": label, "diff": {k: v[1] for k, v in changed.items()}, "status": "failed",
                         "error": str(exc)})

    out = out_root / f"{base.name}-ablation-s{base.seed}-{base.fingerprint()}"
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ("run",) + ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    md = [f"# Ablations at {class_count} classes", "",
          "| Method | " + " | ".join(ABLATION_COLUMNS) + " |", "|" + "---|" * (len(ABLATION_COLUMNS) + 1)]
    md += ["| " + " | ".join([r["run"]] + [r[c] for c in ABLATION_COLUMNS]) + " |" for r in rows]
    md_path = out / "ablation.md"
    md_path.write_text("\n".join(md) + "\n")
    runs_path = out / "ablation_runs.json"
    runs_path.write_text(json.dumps(runs, indent=1, sort_keys=True))
    return {"csv": csv_path, "markdown": md_path, "runs": runs_path}
