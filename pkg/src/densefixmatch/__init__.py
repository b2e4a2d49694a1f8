"""Dense FixMatch: semi-supervised segmentation with matched pseudo-labels."""

__version__ = "0.1.0"
