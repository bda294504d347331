"""Text-guided sounding-object segmentation on a synthetic benchmark."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config  # noqa: F401
