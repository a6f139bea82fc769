"""Unsupervised bi-directional inter-modality registration with five cooperating networks."""

__version__ = "0.1.0"
