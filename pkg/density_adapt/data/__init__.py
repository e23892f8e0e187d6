"""Data ingestion, ground-truth generation and toy domains."""

from density_adapt.data.dataset import (
    CrowdDataset,
    DiskDataset,
    Sample,
    SamplePair,
    load_dataset,
    save_dataset,
    split_indices,
)
from density_adapt.data.density import DensityMap, PointAnnotation, density_from_points
from density_adapt.data.scene import SceneMeta, scene_filter, select_scenes
from density_adapt.data.toy import gen_toy_domains

__all__ = [
    "CrowdDataset",
    "DensityMap",
    "DiskDataset",
    "PointAnnotation",
    "Sample",
    "SamplePair",
    "SceneMeta",
    "density_from_points",
    "gen_toy_domains",
    "load_dataset",
    "save_dataset",
    "scene_filter",
    "select_scenes",
    "split_indices",
]
