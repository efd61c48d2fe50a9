"""Run configuration: nested dataclasses read from a flat dotted-key YAML file."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data.regions import SHIPPED_MAPS, load_region_map
from .errors import ConfigError


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a dataset directory holding manifest.json
    num_concepts: int = 40
    trials_per_concept: int = 10
    latent_dim: int = 8
    channels: int = 62
    samples: int = 96
    frames: int = 6
    height: int = 32
    width: int = 32
    noise_std: float = 0.1
    forward_model_seed: int = 0
    region_map: str = "default"
    holdout_fraction: float = 0.2
    split_seed: int = 0
    fps: float = 3.0
    load_workers: int = 1


@dataclass
class AeConfig:
    latent_channels: int = 8
    width: int = 32
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    kl_weight: float = 1e-4


@dataclass
class RsmConfig:
    per_region_dim: int = 512
    fused_dim: int = 1024
    conv_width: int = 64
    heads: int = 1
    tau: float = 0.07
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    joint_prior: bool = False


@dataclass
class PriorConfig:
    hidden: int = 256
    T_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.1
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    sample_steps: int = 20


@dataclass
class TdaConfig:
    width: int = 64
    d_eeg: int = 128
    d_latent: int = 128
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    train_video_side: bool = False
    use_inversion: bool = False
    inversion_steps: int = 10
    inversion_epochs: int = 20


@dataclass
class DgvrConfig:
    base_width: int = 32
    T_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.04
    alpha: float = 0.3
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 16
    cond_tokens: int = 4
    condition_source: str = "prior_sample"
    sampler: str = "deterministic"
    sample_steps: int = 25
    upsampler_fit_weight: float = 1.0


@dataclass
class AblationConfig:
    drop_region: str | None = None
    drop_feature: str | None = None
    drop_consistency: bool = False


@dataclass
class EvalConfig:
    class_counts: list = field(default_factory=lambda: [10, 20, 30, 40])
    ways: list = field(default_factory=lambda: [2, 40])
    repeats: int = 20
    classifier_epochs: int = 60
    grid_clips: int = 4


@dataclass
class RunConfig:
    name: str = "dynamind"
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    ae: AeConfig = field(default_factory=AeConfig)
    rsm: RsmConfig = field(default_factory=RsmConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    tda: TdaConfig = field(default_factory=TdaConfig)
    dgvr: DgvrConfig = field(default_factory=DgvrConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_flat(self) -> dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of everything that can change an emitted number (the output location cannot)."""
        flat = self.to_flat()
        flat.pop("out_dir")
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **dotted: Any) -> "RunConfig":
        flat = self.to_flat()
        flat.update(dotted)
        return from_flat(flat)


# Full-scale recipe: epochs and learning rates behind --paper-scale
PAPER_SCALE = {
    "rsm.epochs": 300, "rsm.lr": 1e-5,
    "prior.epochs": 1000, "prior.lr": 2e-5,
    "tda.epochs": 300, "tda.lr": 1e-5,
    "dgvr.epochs": 200, "dgvr.lr": 3e-5,
    "rsm.per_region_dim": 512, "rsm.fused_dim": 1024,
    "data.frames": 6,
}


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(name: str, value: Any, default: Any) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, int):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return [int(v) for v in value]
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def from_flat(flat: dict[str, Any]) -> RunConfig:
    cfg = RunConfig()
    for key, value in flat.items():
        parts = key.split(".")
        target = cfg
        for p in parts[:-1]:
            if not dataclasses.is_dataclass(target) or not hasattr(target, p):
                raise ConfigError(f"unknown config key '{key}'")
            target = getattr(target, p)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key '{key}'")
        default = getattr(type(target)(), leaf) if dataclasses.is_dataclass(type(target)) else None
        if dataclasses.is_dataclass(default):
            raise ConfigError(f"'{key}' names a section, not a value")
        setattr(target, leaf, _coerce(key, value, default))
    return cfg


def load_config(path: str | Path | None = None, *, paper_scale: bool = False,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML config (flat dotted keys; nested mappings are flattened), apply overrides, validate."""
    flat: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping of config keys")
        flat = flatten(raw)
    if paper_scale:
        flat.update(PAPER_SCALE)
    flat.update(overrides or {})
    cfg = from_flat(flat)
    validate(cfg)
    return cfg


def region_names(cfg: RunConfig) -> list[str]:
    return list(load_region_map(cfg.data.region_map)["regions"])


def validate(cfg: RunConfig) -> None:
    for section in ("ae", "rsm", "prior", "tda", "dgvr"):
        sub = getattr(cfg, section)
        if not sub.lr > 0:
            raise ConfigError(f"{section}.lr must be > 0")
        if sub.epochs < 0:
            raise ConfigError(f"{section}.epochs must be >= 0")
        if sub.batch_size < 1:
            raise ConfigError(f"{section}.batch_size must be >= 1")
    d = cfg.data
    if d.source != "synthetic" and not (Path(d.source) / "manifest.json").is_file():
        raise ConfigError(f"dataset directory {d.source} has no manifest.json")
    if d.region_map not in SHIPPED_MAPS and not Path(d.region_map).is_file():
        raise ConfigError(f"region map not found: {d.region_map}")
    if not 0 < d.holdout_fraction < 1:
        raise ConfigError("data.holdout_fraction must lie in (0, 1)")
    if d.frames < 2:
        raise ConfigError("data.frames must be >= 2")
    if d.height % 8 or d.width % 8:
        raise ConfigError("data.height and data.width must be multiples of 8")
    if cfg.rsm.tau <= 0:
        raise ConfigError("rsm.tau must be > 0")
    if cfg.dgvr.alpha < 0:
        raise ConfigError("dgvr.alpha must be >= 0")
    if cfg.dgvr.condition_source not in ("prior_sample", "diff_concat"):
        raise ConfigError("dgvr.condition_source must be prior_sample or diff_concat")
    if cfg.dgvr.sampler not in ("deterministic", "ancestral"):
        raise ConfigError("dgvr.sampler must be deterministic or ancestral")
    if not 1 <= cfg.dgvr.sample_steps <= cfg.dgvr.T_steps:
        raise ConfigError("dgvr.sample_steps must lie in [1, dgvr.T_steps]")
    if not 1 <= cfg.prior.sample_steps <= cfg.prior.T_steps:
        raise ConfigError("prior.sample_steps must lie in [1, prior.T_steps]")
    if cfg.tda.use_inversion and not 1 <= cfg.tda.inversion_steps <= cfg.dgvr.T_steps:
        raise ConfigError("tda.inversion_steps must lie in [1, dgvr.T_steps]")
    ab = cfg.ablation
    if ab.drop_region is not None and ab.drop_region not in region_names(cfg):
        raise ConfigError(f"ablation.drop_region '{ab.drop_region}' is not a region of {d.region_map}")
    if ab.drop_feature is not None and ab.drop_feature not in ("image", "text", "category"):
        raise ConfigError("ablation.drop_feature must be image, text or category")
    if not cfg.eval.class_counts:
        raise ConfigError("eval.class_counts must not be empty")
    for n in cfg.eval.class_counts:
        if not 1 <= n <= d.num_concepts:
            raise ConfigError(f"class count {n} outside [1, {d.num_concepts}]")
    for w in cfg.eval.ways:
        if not 2 <= w <= d.num_concepts:
            raise ConfigError(f"eval.ways entries must lie in [2, {d.num_concepts}]")
