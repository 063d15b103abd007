"""pairfuse: feature-fusion networks for pre/post image-pair classification."""

from . import data, experiment, fusion, geometry, layers, metrics, models

__all__ = ["data", "experiment", "fusion", "geometry", "layers", "metrics", "models"]
__version__ = "0.1.0"
