from .io import load_dataset, read_array, read_video, write_array, write_dataset, write_video
from .regions import RegionPartition, load_region_map, partition_channels, partition_for, segment_temporal
from .splits import split_by_class_count
from .synthetic import SyntheticWorld, build_world, generate_synthetic_dataset
from .tables import ConceptTable, load_concept_table
from .types import EEGRecording, SyntheticWorldSpec, TrialPair, VideoClip

__all__ = [
    "ConceptTable", "EEGRecording", "RegionPartition", "SyntheticWorld", "SyntheticWorldSpec", "TrialPair",
    "VideoClip", "build_world", "generate_synthetic_dataset", "load_concept_table", "load_dataset",
    "load_region_map", "partition_channels", "partition_for", "read_array", "read_video", "segment_temporal",
    "split_by_class_count", "write_array", "write_dataset", "write_video",
]
