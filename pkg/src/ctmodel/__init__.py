"""Compression-time prediction for a prediction-based lossy compressor."""

__version__ = "0.1.0"
