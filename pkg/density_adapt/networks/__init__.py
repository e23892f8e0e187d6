"""Network definitions: counter, discriminators, refiner and checkpoints."""

from density_adapt.networks.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from density_adapt.networks.counter import Counter, TapBundle
from density_adapt.networks.discriminators import FeatureDiscriminator, MapDiscriminator
from density_adapt.networks.refiner import MapRefiner

# archive names of the feature discriminators, by tap
TAP_ARCHIVE_NAMES = {"dilation": "D1", "spatial": "D2", "backbone": "D0"}

__all__ = [
    "Counter",
    "FeatureDiscriminator",
    "MapDiscriminator",
    "MapRefiner",
    "TAP_ARCHIVE_NAMES",
    "TapBundle",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
]
