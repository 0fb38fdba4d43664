"""Fine-grain segmentation error-map prediction and per-case quality scoring."""

__version__ = "0.1.0"
