"""Object context pooling networks for semantic segmentation on numpy."""

__version__ = "0.1.0"
