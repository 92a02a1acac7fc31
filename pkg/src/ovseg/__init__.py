"""Two-stage open-vocabulary semantic segmentation on a synthetic shapes benchmark."""

__version__ = "0.1.0"
