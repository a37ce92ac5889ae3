"""Contrastive learning with the logistic loss for density-ratio estimation,
energy-based model estimation, simulator-based inference and experimental design."""

__version__ = "0.1.0"
