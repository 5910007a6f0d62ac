"""Weakly-supervised cross-modal (CT + MR) 3D segmentation from scribbles."""

__version__ = "0.1.0"
