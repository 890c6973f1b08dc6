"""Lidar pre-training data preparation: beam re-sampling, object re-scaling,
pseudo-label filtering, rotated-box metrics and cross-view matching."""

__version__ = "0.1.0"
