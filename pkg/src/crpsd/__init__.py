"""Saliency detection from fused region-level and pixel-level networks."""

__version__ = "0.1.0"
