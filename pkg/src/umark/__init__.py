"""Uncertainty-patterned watermarking for binary segmentation networks."""

__version__ = "0.1.0"
