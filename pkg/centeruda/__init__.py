"""Anchorless keypoint detection with unsupervised sim2real domain adaptation."""

__version__ = "0.1.0"
