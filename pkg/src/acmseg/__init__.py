"""Differentiable level-set segmentation driven by a convolutional backbone."""

__version__ = "0.1.0"
