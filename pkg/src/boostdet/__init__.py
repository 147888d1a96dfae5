"""Noise-robust boosted ensembles of miniature anchor-based detectors."""

__version__ = "0.1.0"
