"""Brain-region channel partitions and temporal windowing."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ValidationError
from .types import EEGRecording

SHIPPED_MAPS = {
    "default": "regions_5lobe_62ch.json",
    "5lobe": "regions_5lobe_62ch.json",
    "4region": "regions_4region_62ch.json",
}


@dataclass(frozen=True)
class RegionPartition:
    regions: dict[str, tuple[int, ...]]

    def __post_init__(self):
        if not self.regions:
            raise ValidationError("a partition needs at least one region")
        seen: set[int] = set()
        for name, idx in self.regions.items():
            if len(idx) == 0:
                raise ValidationError(f"region '{name}' is empty")
            if any(i < 0 for i in idx):
                raise ValidationError(f"region '{name}' has a negative channel index")
            if seen.intersection(idx) or len(set(idx)) != len(idx):
                raise ValidationError(f"region '{name}' overlaps another region")
            seen.update(idx)
        object.__setattr__(self, "regions", {k: tuple(int(i) for i in v) for k, v in self.regions.items()})

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def names(self) -> list[str]:
        return list(self.regions)

    @property
    def sizes(self) -> list[int]:
        return [len(v) for v in self.regions.values()]

    def channel_order(self) -> list[int]:
        return [i for idx in self.regions.values() for i in idx]

    def validate_against(self, n_channels: int) -> None:
        for name, idx in self.regions.items():
            bad = [i for i in idx if i >= n_channels]
            if bad:
                raise ValidationError(f"region '{name}' references channel {bad[0]} but the recording has {n_channels}")

    @classmethod
    def even_split(cls, n_channels: int, names: list[str]) -> "RegionPartition":
        """Contiguous, near-equal split; used when no channel-name map applies."""
        if len(names) > n_channels:
            raise ValidationError("more regions than channels")
        chunks = np.array_split(np.arange(n_channels), len(names))
        return cls({name: tuple(c.tolist()) for name, c in zip(names, chunks)})

    @classmethod
    def from_names(cls, region_channels: dict[str, list[str]], channel_names: list[str]) -> "RegionPartition":
        lookup = {name.upper(): i for i, name in enumerate(channel_names)}
        regions = {}
        for region, chans in region_channels.items():
            missing = [c for c in chans if c.upper() not in lookup]
            if missing:
                raise ValidationError(f"region '{region}' names unknown channel(s) {missing[:3]}")
            regions[region] = tuple(lookup[c.upper()] for c in chans)
        return cls(regions)


def load_region_map(name_or_path: str) -> dict:
    """Read a region-map JSON ``{"channels": [...], "regions": {name: [channel names]}}``."""
    if name_or_path in SHIPPED_MAPS:
        text = resources.files("dynamind.data.resources").joinpath(SHIPPED_MAPS[name_or_path]).read_text()
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(f"region map not found: {path}")
        text = path.read_text()
    spec = json.loads(text)
    if "regions" not in spec:
        raise ConfigError(f"region map {name_or_path} lacks a 'regions' entry")
    return spec


def partition_for(channel_names: list[str], region_map: str = "default") -> RegionPartition:
    """Resolve a region map against a recording's channel names.

    Maps are keyed by electrode name; when the recording's names do not match the map
    (synthetic montages), the map's region names are kept and channels are split evenly.
    """
    spec = load_region_map(region_map)
    known = {c.upper() for chans in spec["regions"].values() for c in chans}
    if {c.upper() for c in channel_names} >= known:
        return RegionPartition.from_names(spec["regions"], channel_names)
    return RegionPartition.even_split(len(channel_names), list(spec["regions"]))


def partition_channels(rec: EEGRecording, part: RegionPartition) -> list[np.ndarray]:
    part.validate_against(rec.n_channels)
    return [rec.data[list(idx)].copy() for idx in part.regions.values()]


def segment_temporal(rec: EEGRecording, n_windows: int) -> list[np.ndarray]:
    """Split into ``n_windows`` contiguous windows; trailing remainder samples are dropped."""
    if n_windows < 1:
        raise ValidationError("n_windows must be >= 1")
    if n_windows > rec.n_samples:
        raise ValidationError(f"cannot cut {rec.n_samples} samples into {n_windows} windows")
    width = rec.n_samples // n_windows
    return [rec.data[:, i * width:(i + 1) * width].copy() for i in range(n_windows)]
