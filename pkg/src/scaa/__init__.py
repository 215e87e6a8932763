"""Hybrid 2D/3D segmentation with multi-slice feature aggregation attention."""

__version__ = "0.1.0"
