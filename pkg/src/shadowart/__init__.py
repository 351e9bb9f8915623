"""shadowart: neural occupancy fields trained to cast target shadows.

A target binary image per light/screen pair drives a jointly optimized
implicit occupancy field plus the light and screen directions themselves;
the trained field is extracted as a fabricable triangle mesh whose cast
shadows reproduce the targets.
"""

from .field import EncodingConfig, OccupancyField
from .geometry import ProjectionConstraint
from .images import TargetImage, load_binary_image
from .losses import LossWeights
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "EncodingConfig",
    "OccupancyField",
    "ProjectionConstraint",
    "TargetImage",
    "load_binary_image",
    "LossWeights",
    "TrainConfig",
    "TrainResult",
    "train",
    "__version__",
]
