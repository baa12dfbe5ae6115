"""Volumetric capsule-network segmentation with hand-verified gradients."""

__version__ = "0.1.0"
