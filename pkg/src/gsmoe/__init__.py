"""Gaussian-splatting guided mixture of experts for weakly-supervised
temporal anomaly detection, at desk scale."""

__version__ = "0.1.0"
