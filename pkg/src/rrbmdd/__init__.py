"""Robust RBM-based concept drift detection for data streams under poisoning attacks."""

__version__ = "0.1.0"
